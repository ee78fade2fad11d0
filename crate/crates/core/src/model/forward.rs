//! Inference-side forward pass, split into row-wise stages so that the decode
//! cache can recompute an arbitrary subset of positions with the exact same
//! arithmetic as a full pass.

use std::ops::Range;

use super::linalg::{gelu, gemm, layer_norm, linear, linear_nobias, Scalar, View};
use super::{AttentionMask, LayerParams, ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Optional per-position sub-vocabulary applied to logits.
pub type Restriction = Option<Range<TokenId>>;

/// Cached per-layer quantities, each `seq_len × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeature<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub attn_out: Vec<T>,
    pub ffn_out: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures<T> {
    pub layers: Vec<LayerFeature<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `rows × vocab`, in the order the rows were requested.
    pub logits: Vec<T>,
    pub features: Option<LayerFeatures<T>>,
}

pub(crate) fn check_inputs<T: Scalar>(
    params: &ModelParameters<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
) -> Result<()> {
    let cfg = &params.config;
    if tokens.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: cfg.max_seq });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::InvalidTokenId { token: t, vocab: cfg.vocab });
    }
    if mask.n != tokens.len() {
        return Err(Error::DimensionMismatch { expected: tokens.len(), got: mask.n });
    }
    Ok(())
}

/// Token plus positional embedding for each `(token, position)` pair.
pub fn embed_rows<T: Scalar>(params: &ModelParameters<T>, tokens: &[TokenId], positions: &[usize]) -> Vec<T> {
    let d = params.config.d_model;
    let mut x = vec![T::zero(); tokens.len() * d];
    for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
        let te = &params.tok_emb[t as usize * d..(t as usize + 1) * d];
        let pe = &params.pos_emb[p * d..(p + 1) * d];
        for j in 0..d {
            x[r * d + j] = te[j] + pe[j];
        }
    }
    x
}

/// Pre-norm query, key and value projections of residual rows.
pub fn project_qkv<T: Scalar>(lp: &LayerParams<T>, d: usize, x: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = x.len() / d;
    let mut a = vec![T::zero(); x.len()];
    layer_norm(x, d, &lp.ln1_g, &lp.ln1_b, &mut a, None);
    (linear(&a, m, &lp.wq, &lp.bq, d), linear_nobias(&a, m, &lp.wk, d), linear(&a, m, &lp.wv, &lp.bv, d))
}

/// Value projection only.
pub fn value_rows<T: Scalar>(lp: &LayerParams<T>, d: usize, x: &[T]) -> Vec<T> {
    let m = x.len() / d;
    let mut a = vec![T::zero(); x.len()];
    layer_norm(x, d, &lp.ln1_g, &lp.ln1_b, &mut a, None);
    linear(&a, m, &lp.wv, &lp.bv, d)
}

/// Masked multi-head attention of query rows at `positions` against all keys.
/// Returns the per-head context (`m × d`); when `probs` is given, the
/// softmax weights are stored there as `heads × m × n`.
pub(crate) fn attention_core<T: Scalar>(
    cfg: &ModelConfig,
    q: &[T],
    positions: &[usize],
    keys: &[T],
    values: &[T],
    mask: &AttentionMask,
    mut probs: Option<&mut [T]>,
) -> Vec<T> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let m = positions.len();
    let n = mask.n;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut ctx = vec![T::zero(); m * d];
    let mut scores = vec![T::zero(); m * n];
    for h in 0..cfg.heads {
        let qh = View::cols(q, m, d, h * dh, dh);
        let kh = View::cols(keys, n, d, h * dh, dh);
        gemm(scale, qh, kh.t(), T::zero(), &mut scores, n, 1);
        for (r, &p) in positions.iter().enumerate() {
            let row = &mut scores[r * n..(r + 1) * n];
            let ext = mask.extent[p];
            let allow = &mask.allow[p * n..(p + 1) * n];
            let mut max = T::neg_infinity();
            for j in 0..ext {
                if allow[j] && row[j] > max {
                    max = row[j];
                }
            }
            let mut sum = T::zero();
            for j in 0..n {
                if j < ext && allow[j] {
                    let e = (row[j] - max).exp();
                    row[j] = e;
                    sum += e;
                } else {
                    row[j] = T::zero();
                }
            }
            let inv = T::one() / sum;
            for v in row[..ext].iter_mut() {
                *v *= inv;
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h * m * n..(h + 1) * m * n].copy_from_slice(&scores);
        }
        let vh = View::cols(values, n, d, h * dh, dh);
        gemm(T::one(), View::new(&scores, m, n), vh, T::zero(), &mut ctx[h * dh..], d, 1);
    }
    ctx
}

/// Attention block output (after the output projection) for query rows.
pub fn attend_rows<T: Scalar>(
    lp: &LayerParams<T>,
    cfg: &ModelConfig,
    q: &[T],
    positions: &[usize],
    keys: &[T],
    values: &[T],
    mask: &AttentionMask,
) -> Vec<T> {
    let ctx = attention_core(cfg, q, positions, keys, values, mask, None);
    linear(&ctx, positions.len(), &lp.wo, &lp.bo, cfg.d_model)
}

/// Pre-norm GELU feed-forward output for residual rows.
pub fn ffn_rows<T: Scalar>(lp: &LayerParams<T>, cfg: &ModelConfig, x1: &[T]) -> Vec<T> {
    let d = cfg.d_model;
    let ff = cfg.ff_dim();
    let m = x1.len() / d;
    let mut b = vec![T::zero(); x1.len()];
    layer_norm(x1, d, &lp.ln2_g, &lp.ln2_b, &mut b, None);
    let mut u = linear(&b, m, &lp.w_fc, &lp.b_fc, ff);
    u.iter_mut().for_each(|v| *v = gelu(*v));
    linear(&u, m, &lp.w_proj, &lp.b_proj, d)
}

/// Final norm and vocabulary projection.
pub fn head_rows<T: Scalar>(params: &ModelParameters<T>, x: &[T]) -> Vec<T> {
    let d = params.config.d_model;
    let m = x.len() / d;
    let mut h = vec![T::zero(); x.len()];
    layer_norm(x, d, &params.lnf_g, &params.lnf_b, &mut h, None);
    linear(&h, m, &params.w_head, &params.b_head, params.config.vocab)
}

/// Full pass over `tokens`; logits only for `rows`.
pub fn forward_rows<T: Scalar>(
    params: &ModelParameters<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    rows: &[usize],
    capture_features: bool,
) -> Result<ForwardOutput<T>> {
    check_inputs(params, tokens, mask)?;
    let cfg = &params.config;
    let d = cfg.d_model;
    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let mut x = embed_rows(params, tokens, &positions);
    let mut features = Vec::new();
    for lp in &params.layers {
        let (q, k, v) = project_qkv(lp, d, &x);
        let o = attend_rows(lp, cfg, &q, &positions, &k, &v, mask);
        x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
        let f = ffn_rows(lp, cfg, &x);
        x.iter_mut().zip(&f).for_each(|(a, &b)| *a += b);
        if capture_features {
            features.push(LayerFeature { keys: k, values: v, attn_out: o, ffn_out: f });
        }
    }
    let mut picked = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        picked.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    let logits = head_rows(params, &picked);
    Ok(ForwardOutput { logits, features: capture_features.then_some(LayerFeatures { layers: features }) })
}

/// Logits for every position; restricted positions get `-inf` outside their range.
pub fn forward<T: Scalar>(
    params: &ModelParameters<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    capture_features: bool,
    restrict: Option<&[Restriction]>,
) -> Result<ForwardOutput<T>> {
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let mut out = forward_rows(params, tokens, mask, &rows, capture_features)?;
    if let Some(restrict) = restrict {
        let v = params.config.vocab;
        for (r, range) in restrict.iter().enumerate() {
            if let Some(range) = range {
                apply_restriction(&mut out.logits[r * v..(r + 1) * v], range);
            }
        }
    }
    Ok(out)
}

pub(crate) fn apply_restriction<T: Scalar>(row: &mut [T], range: &Range<TokenId>) {
    for (t, l) in row.iter_mut().enumerate() {
        if !range.contains(&(t as TokenId)) {
            *l = T::neg_infinity();
        }
    }
}
