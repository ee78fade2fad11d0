use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::error::{Error, Result};

const KMEANS_ITERS: usize = 25;

/// Row-major interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        RgbImage { height, width, pixels }
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bytes of the patch at grid cell (`pr`, `pc`), rows then columns then channels.
    fn patch_bytes(&self, patch: usize, pr: usize, pc: usize, out: &mut Vec<u8>) {
        out.clear();
        for r in 0..patch {
            let row = pr * patch + r;
            let start = (row * self.width + pc * patch) * 3;
            out.extend_from_slice(&self.pixels[start..start + patch * 3]);
        }
    }
}

/// Patch vector quantizer backed by a k-means codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCodec {
    pub offset: u32,
    pub patch: usize,
    pub img_h: usize,
    pub img_w: usize,
    /// `codebook_size` rows of `3 * patch * patch` values in [0, 1].
    pub codebook: Vec<f32>,
    pub codebook_size: usize,
}

impl ImageCodec {
    pub fn from_codebook(offset: u32, patch: usize, img_h: usize, img_w: usize, codebook: Vec<f32>) -> Self {
        assert!(img_h.is_multiple_of(patch) && img_w.is_multiple_of(patch), "image dims must be divisible by patch");
        let dim = 3 * patch * patch;
        assert!(!codebook.is_empty() && codebook.len().is_multiple_of(dim), "codebook rows must have length 3*patch^2");
        let codebook_size = codebook.len() / dim;
        ImageCodec { offset, patch, img_h, img_w, codebook, codebook_size }
    }

    /// Seeded k-means over all patches of `images` (25 Lloyd iterations).
    ///
    /// Centroids start from `k` distinct patches sampled with `seed`. Duplicate
    /// patches are folded into weighted points, which leaves each iteration's
    /// assignment and means unchanged.
    pub fn fit(offset: u32, images: &[&RgbImage], patch: usize, k: usize, seed: u64) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let (img_h, img_w) = (first.height, first.width);
        if patch == 0 || img_h % patch != 0 || img_w % patch != 0 {
            return Err(Error::DimensionMismatch { expected: patch, got: img_h.min(img_w) % patch.max(1) });
        }
        let dim = 3 * patch * patch;

        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut points: Vec<Vec<u8>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut buf = Vec::with_capacity(dim);
        for img in images {
            if img.height != img_h || img.width != img_w {
                return Err(Error::DimensionMismatch { expected: img_h * img_w, got: img.height * img.width });
            }
            for pr in 0..img_h / patch {
                for pc in 0..img_w / patch {
                    img.patch_bytes(patch, pr, pc, &mut buf);
                    match index.get(&buf) {
                        Some(&i) => weights[i] += 1.0,
                        None => {
                            index.insert(buf.clone(), points.len());
                            points.push(buf.clone());
                            weights.push(1.0);
                        }
                    }
                }
            }
        }
        if points.len() < k {
            return Err(Error::TooFewPatches { distinct: points.len(), needed: k });
        }
        let data: Vec<f32> = points.iter().flatten().map(|&b| b as f32 / 255.0).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = rand::seq::index::sample(&mut rng, points.len(), k);
        let mut codebook: Vec<f32> = Vec::with_capacity(k * dim);
        for i in init.iter() {
            codebook.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }

        let mut sums = vec![0f64; k * dim];
        let mut mass = vec![0f64; k];
        for _ in 0..KMEANS_ITERS {
            sums.iter_mut().for_each(|s| *s = 0.0);
            mass.iter_mut().for_each(|m| *m = 0.0);
            for (p, w) in data.chunks_exact(dim).zip(&weights) {
                let c = nearest(&codebook, dim, p);
                mass[c] += w;
                for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                    *s += w * x as f64;
                }
            }
            for c in 0..k {
                // Empty clusters keep their previous centroid.
                if mass[c] > 0.0 {
                    for d in 0..dim {
                        codebook[c * dim + d] = (sums[c * dim + d] / mass[c]) as f32;
                    }
                }
            }
        }
        Ok(ImageCodec { offset, patch, img_h, img_w, codebook, codebook_size: k })
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn tokens_per_image(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }

    pub fn entry(&self, code: usize) -> &[f32] {
        let dim = self.patch_dim();
        &self.codebook[code * dim..(code + 1) * dim]
    }

    /// Nearest codebook entry per patch (squared Euclidean, lowest index on ties).
    pub fn encode(&self, img: &RgbImage) -> Result<Vec<TokenId>> {
        if img.height != self.img_h || img.width != self.img_w {
            return Err(Error::DimensionMismatch { expected: self.img_h * self.img_w, got: img.height * img.width });
        }
        let dim = self.patch_dim();
        let mut bytes = Vec::with_capacity(dim);
        let mut p = vec![0f32; dim];
        let mut out = Vec::with_capacity(self.tokens_per_image());
        for pr in 0..self.img_h / self.patch {
            for pc in 0..self.img_w / self.patch {
                img.patch_bytes(self.patch, pr, pc, &mut bytes);
                for (x, &b) in p.iter_mut().zip(&bytes) {
                    *x = b as f32 / 255.0;
                }
                out.push(self.offset + nearest(&self.codebook, dim, &p) as u32);
            }
        }
        Ok(out)
    }

    /// Tiles codebook entries back into an image.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<RgbImage> {
        if tokens.len() != self.tokens_per_image() {
            return Err(Error::DimensionMismatch { expected: self.tokens_per_image(), got: tokens.len() });
        }
        let grid_w = self.img_w / self.patch;
        let mut img = RgbImage::filled(self.img_h, self.img_w, [0, 0, 0]);
        for (i, &t) in tokens.iter().enumerate() {
            if t < self.offset || t >= self.offset + self.codebook_size as u32 {
                return Err(Error::OutOfRangeToken { token: t, expected: "image" });
            }
            let entry = self.entry((t - self.offset) as usize);
            let (pr, pc) = (i / grid_w, i % grid_w);
            for r in 0..self.patch {
                for c in 0..self.patch {
                    let e = &entry[(r * self.patch + c) * 3..(r * self.patch + c) * 3 + 3];
                    let px = [to_byte(e[0]), to_byte(e[1]), to_byte(e[2])];
                    img.set(pr * self.patch + r, pc * self.patch + c, px);
                }
            }
        }
        Ok(img)
    }
}

fn to_byte(x: f32) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

fn nearest(codebook: &[f32], dim: usize, p: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (c, entry) in codebook.chunks_exact(dim).enumerate() {
        let d: f32 = entry.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}
