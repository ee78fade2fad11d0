//! Central finite-difference verification of [`loss_and_grad`].
//!
//! The numerical side reuses only the inference forward pass, evaluated in
//! double-double precision, so it shares no code with backpropagation.

use super::extended::Dd;
use super::forward::{attend_rows, embed_rows, ffn_rows, forward_rows, head_rows, project_qkv};
use super::linalg::Scalar;
use super::{loss_and_grad, tensor_specs, AttentionMask, ModelParameters};
use crate::error::{Error, Result};
use crate::sequence::MaskedSample;

/// Floor added to the finite-difference magnitude in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Masked cross-entropy computed from the inference forward pass.
pub fn masked_loss<T: Scalar>(params: &ModelParameters<T>, batch: &[MaskedSample], mask: &AttentionMask) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let v = params.config.vocab;
    let mut total = T::zero();
    for s in batch {
        let rows: Vec<usize> = s.masked_positions().collect();
        if rows.is_empty() {
            return Err(Error::NoMaskablePositions);
        }
        let logits = forward_rows(params, &s.input_tokens, mask, &rows, false)?.logits;
        total += row_losses(&logits, v, &rows, &s.target_tokens);
    }
    Ok(total / T::lit(batch.len() as f64))
}

fn row_losses<T: Scalar>(logits: &[T], v: usize, rows: &[usize], targets: &[u32]) -> T {
    let mut l = T::zero();
    for (i, &r) in rows.iter().enumerate() {
        let row = &logits[i * v..(i + 1) * v];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
        l += z.ln() - (row[targets[r] as usize] - max);
    }
    l / T::lit(rows.len() as f64)
}

/// Residual stream entering each layer (and the final norm) for one sample.
fn residuals<T: Scalar>(params: &ModelParameters<T>, s: &MaskedSample, mask: &AttentionMask) -> Vec<Vec<T>> {
    let positions: Vec<usize> = (0..s.input_tokens.len()).collect();
    let mut x = embed_rows(params, &s.input_tokens, &positions);
    let mut out = vec![x.clone()];
    for lp in &params.layers {
        advance(params, lp, &mut x, &positions, mask);
        out.push(x.clone());
    }
    out
}

fn advance<T: Scalar>(
    params: &ModelParameters<T>,
    lp: &super::LayerParams<T>,
    x: &mut [T],
    positions: &[usize],
    mask: &AttentionMask,
) {
    let cfg = &params.config;
    let (q, k, v) = project_qkv(lp, cfg.d_model, x);
    let o = attend_rows(lp, cfg, &q, positions, &k, &v, mask);
    x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
    let f = ffn_rows(lp, cfg, x);
    x.iter_mut().zip(&f).for_each(|(a, &b)| *a += b);
}

/// Loss when only parameters of layer `start` onward (or the embeddings when
/// `start` is `None`) differ from the ones `prefix` was computed with.
fn loss_from<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &[MaskedSample],
    mask: &AttentionMask,
    prefix: &[Vec<Vec<T>>],
    start: Option<usize>,
) -> T {
    let d = params.config.d_model;
    let v = params.config.vocab;
    let mut total = T::zero();
    for (s, pre) in batch.iter().zip(prefix) {
        let n = s.input_tokens.len();
        let positions: Vec<usize> = (0..n).collect();
        let (mut x, first) = match start {
            None => (embed_rows(params, &s.input_tokens, &positions), 0),
            Some(l) => (pre[l].clone(), l),
        };
        for lp in &params.layers[first..] {
            advance(params, lp, &mut x, &positions, mask);
        }
        let rows: Vec<usize> = s.masked_positions().collect();
        let mut picked = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            picked.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        total += row_losses(&head_rows(params, &picked), v, &rows, &s.target_tokens);
    }
    total / T::lit(batch.len() as f64)
}

/// First stage whose output depends on the named tensor.
fn stage_of(name: &str, layers: usize) -> Option<usize> {
    match name.strip_prefix("layers.") {
        Some(rest) => rest.split('.').next().and_then(|l| l.parse().ok()),
        None if name.ends_with("_emb") => None,
        None => Some(layers),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic − numeric| / (|numeric| + REL_FLOOR)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub worst: GradCheckEntry,
    /// Worst relative error per tensor, in canonical order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.rel_error
    }
}

/// Compares the `f64` analytic gradient with a central difference of step
/// `step` for every parameter entry.
pub fn check_gradients(
    params: &ModelParameters<f64>,
    batch: &[MaskedSample],
    mask: &AttentionMask,
    step: f64,
) -> Result<GradCheckReport> {
    let analytic = loss_and_grad(params, batch, mask)?.grads;
    let mut probe: ModelParameters<Dd> = params.cast();
    let prefix: Vec<_> = batch.iter().map(|s| residuals(&probe, s, mask)).collect();
    let specs = tensor_specs(&params.config);
    let h = Dd::new(step);
    let two_h = Dd::new(2.0 * step);
    let mut worst = None::<GradCheckEntry>;
    let mut per_tensor = Vec::with_capacity(specs.len());
    let mut entries_checked = 0;
    for (ti, spec) in specs.iter().enumerate() {
        let grads = analytic.tensors()[ti];
        let start = stage_of(&spec.name, params.config.layers);
        let mut tensor_worst = 0.0f64;
        for (e, &a) in grads.iter().enumerate() {
            let orig = probe.tensors()[ti][e];
            probe.tensors_mut()[ti][e] = orig + h;
            let plus = loss_from(&probe, batch, mask, &prefix, start);
            probe.tensors_mut()[ti][e] = orig - h;
            let minus = loss_from(&probe, batch, mask, &prefix, start);
            probe.tensors_mut()[ti][e] = orig;
            let numeric = ((plus - minus) / two_h).to_f64();
            let rel_error = (a - numeric).abs() / (numeric.abs() + REL_FLOOR);
            tensor_worst = tensor_worst.max(rel_error);
            entries_checked += 1;
            if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
                worst = Some(GradCheckEntry { tensor: spec.name.clone(), index: e, analytic: a, numeric, rel_error });
            }
        }
        per_tensor.push((spec.name.clone(), tensor_worst));
    }
    Ok(GradCheckReport { entries_checked, worst: worst.ok_or(Error::EmptyDataset)?, per_tensor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn staged_loss_matches_full_forward() {
        let cfg = ModelConfig { layers: 2, d_model: 8, heads: 2, max_seq: 8, vocab: 12, seed: 2, ..Default::default() };
        let p = ModelParameters::<Dd>::init_with_std(&cfg, 0.4);
        let s = MaskedSample {
            input_tokens: vec![3, 1, 5, 1, 7, 2],
            target_tokens: vec![3, 9, 5, 4, 7, 2],
            mask_flags: vec![false, true, false, true, false, false],
            n_masked: 2,
        };
        let mask = AttentionMask::from_fn(6, |i, j| j <= i + 1);
        let batch = [s];
        let full = masked_loss(&p, &batch, &mask).unwrap();
        let prefix: Vec<_> = batch.iter().map(|s| residuals(&p, s, &mask)).collect();
        for start in [None, Some(0), Some(1), Some(2)] {
            let staged = loss_from(&p, &batch, &mask, &prefix, start);
            assert!((staged - full).abs().to_f64() < 1e-28);
        }
        assert_eq!(stage_of("tok_emb", 2), None);
        assert_eq!(stage_of("layers.1.wq", 2), Some(1));
        assert_eq!(stage_of("w_head", 2), Some(2));
    }
}
