use serde::{Deserialize, Serialize};

use super::{TokenId, ACTION_BINS};
use crate::error::{Error, Result};

const DEGENERATE_PAD: f64 = 1e-6;

/// Uniform per-dimension binning of continuous actions into a shared id range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBinner {
    pub offset: u32,
    pub dims: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: u32,
}

impl ActionBinner {
    /// Bounds come from the data range; a constant dimension is widened by ±1e-6.
    pub fn fit<A: AsRef<[f64]>>(offset: u32, actions: &[A], dims: usize) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut lo = vec![f64::INFINITY; dims];
        let mut hi = vec![f64::NEG_INFINITY; dims];
        for a in actions {
            let a = a.as_ref();
            if a.len() != dims {
                return Err(Error::DimensionMismatch { expected: dims, got: a.len() });
            }
            for j in 0..dims {
                lo[j] = lo[j].min(a[j]);
                hi[j] = hi[j].max(a[j]);
            }
        }
        for j in 0..dims {
            if hi[j] <= lo[j] {
                lo[j] -= DEGENERATE_PAD;
                hi[j] += DEGENERATE_PAD;
            }
        }
        Ok(ActionBinner { offset, dims, lo, hi, bins: ACTION_BINS })
    }

    pub fn from_bounds(offset: u32, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| h > l), "hi must exceed lo");
        ActionBinner { offset, dims: lo.len(), lo, hi, bins: ACTION_BINS }
    }

    pub fn width(&self, dim: usize) -> f64 {
        (self.hi[dim] - self.lo[dim]) / self.bins as f64
    }

    pub fn bin(&self, dim: usize, value: f64) -> u32 {
        let raw = ((value - self.lo[dim]) / self.width(dim)).floor();
        raw.clamp(0.0, (self.bins - 1) as f64) as u32
    }

    /// One token per dimension; out-of-range values clamp to the edge bins.
    pub fn encode(&self, action: &[f64]) -> Result<Vec<TokenId>> {
        if action.len() != self.dims {
            return Err(Error::DimensionMismatch { expected: self.dims, got: action.len() });
        }
        Ok(action.iter().enumerate().map(|(j, &a)| self.offset + self.bin(j, a)).collect())
    }

    /// Bin centers.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.len() != self.dims {
            return Err(Error::DimensionMismatch { expected: self.dims, got: tokens.len() });
        }
        tokens
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                if t < self.offset || t >= self.offset + self.bins {
                    return Err(Error::OutOfRangeToken { token: t, expected: "action" });
                }
                let b = (t - self.offset) as f64;
                Ok(self.lo[j] + (b + 0.5) * self.width(j))
            })
            .collect()
    }

    /// Encodes a chunk of actions dimension-major within each step.
    pub fn encode_chunk<A: AsRef<[f64]>>(&self, chunk: &[A]) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(chunk.len() * self.dims);
        for a in chunk {
            out.extend(self.encode(a.as_ref())?);
        }
        Ok(out)
    }

    pub fn decode_chunk(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        if !tokens.len().is_multiple_of(self.dims) {
            return Err(Error::DimensionMismatch { expected: self.dims, got: tokens.len() % self.dims });
        }
        tokens.chunks(self.dims).map(|c| self.decode(c)).collect()
    }
}
