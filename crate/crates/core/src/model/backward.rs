//! Masked cross-entropy loss and its analytic gradient.

use super::forward::{attention_core, check_inputs, embed_rows};
use super::linalg::{gelu, gelu_grad, gemm, layer_norm, linear, linear_nobias, sum, Scalar, View};
use super::{AttentionMask, LayerParams, ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::sequence::MaskedSample;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Batch mean of the per-sample masked loss.
    pub loss: f64,
    pub grads: ModelParameters<T>,
}

struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    b: Vec<T>,
    u: Vec<T>,
    z: Vec<T>,
}

/// `out (k×n) += aᵀ b` with `a: m×k`, `b: m×n`.
fn acc_tn<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    gemm(T::one(), View::new(a, m, k).t(), View::new(b, m, n), T::one(), out, n, 1);
}

/// `a (m×n) · wᵀ` with `w: k×n`.
fn mul_nt<T: Scalar>(a: &[T], m: usize, n: usize, w: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    gemm(T::one(), View::new(a, m, n), View::new(w, k, n).t(), T::zero(), &mut out, k, 1);
    out
}

fn acc_colsum<T: Scalar>(x: &[T], n: usize, out: &mut [T]) {
    for row in x.chunks_exact(n) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
}

/// Layer-norm backward. Adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn ln_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let inv_d = T::one() / T::lit(d as f64);
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            s1 += dxh;
            s2 += dxh * xh[j];
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
        s1 *= inv_d;
        s2 *= inv_d;
        for j in 0..d {
            dx[r * d + j] += rs * (dyr[j] * g[j] - s1 - xh[j] * s2);
        }
    }
}

fn layer_forward<T: Scalar>(
    lp: &LayerParams<T>,
    cfg: &ModelConfig,
    x: &mut [T],
    positions: &[usize],
    mask: &AttentionMask,
) -> LayerCache<T> {
    let d = cfg.d_model;
    let n = positions.len();
    let mut a = vec![T::zero(); n * d];
    let mut xhat1 = vec![T::zero(); n * d];
    let rstd1 = layer_norm(x, d, &lp.ln1_g, &lp.ln1_b, &mut a, Some(&mut xhat1));
    let q = linear(&a, n, &lp.wq, &lp.bq, d);
    let k = linear_nobias(&a, n, &lp.wk, d);
    let v = linear(&a, n, &lp.wv, &lp.bv, d);
    let mut probs = vec![T::zero(); cfg.heads * n * n];
    let ctx = attention_core(cfg, &q, positions, &k, &v, mask, Some(&mut probs));
    let o = linear(&ctx, n, &lp.wo, &lp.bo, d);
    x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
    let mut b = vec![T::zero(); n * d];
    let mut xhat2 = vec![T::zero(); n * d];
    let rstd2 = layer_norm(x, d, &lp.ln2_g, &lp.ln2_b, &mut b, Some(&mut xhat2));
    let u = linear(&b, n, &lp.w_fc, &lp.b_fc, cfg.ff_dim());
    let z: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
    let f = linear(&z, n, &lp.w_proj, &lp.b_proj, d);
    x.iter_mut().zip(&f).for_each(|(a, &b)| *a += b);
    LayerCache { xhat1, rstd1, a, q, k, v, probs, ctx, xhat2, rstd2, b, u, z }
}

/// Backward through one layer; `dx` holds the gradient w.r.t. the layer
/// output on entry and w.r.t. its input on exit.
fn layer_backward<T: Scalar>(
    lp: &LayerParams<T>,
    gl: &mut LayerParams<T>,
    cfg: &ModelConfig,
    c: &LayerCache<T>,
    mask: &AttentionMask,
    dx: &mut [T],
) {
    let d = cfg.d_model;
    let ff = cfg.ff_dim();
    let n = c.rstd1.len();
    let dh = cfg.head_dim();

    // Feed-forward branch.
    acc_tn(&c.z, n, ff, dx, d, &mut gl.w_proj);
    acc_colsum(dx, d, &mut gl.b_proj);
    let mut du = mul_nt(dx, n, d, &lp.w_proj, ff);
    du.iter_mut().zip(&c.u).for_each(|(g, &u)| *g *= gelu_grad(u));
    acc_tn(&c.b, n, d, &du, ff, &mut gl.w_fc);
    acc_colsum(&du, ff, &mut gl.b_fc);
    let db = mul_nt(&du, n, ff, &lp.w_fc, d);
    ln_backward(&db, &c.xhat2, &c.rstd2, &lp.ln2_g, d, dx, &mut gl.ln2_g, &mut gl.ln2_b);

    // Attention branch.
    acc_tn(&c.ctx, n, d, dx, d, &mut gl.wo);
    acc_colsum(dx, d, &mut gl.bo);
    let dctx = mul_nt(dx, n, d, &lp.wo, d);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n * n];
    for h in 0..cfg.heads {
        let p = &c.probs[h * n * n..(h + 1) * n * n];
        let dctx_h = View::cols(&dctx, n, d, h * dh, dh);
        let vh = View::cols(&c.v, n, d, h * dh, dh);
        gemm(T::one(), dctx_h, vh.t(), T::zero(), &mut dp, n, 1);
        gemm(T::one(), View::new(p, n, n).t(), dctx_h, T::zero(), &mut dv[h * dh..], d, 1);
        for i in 0..n {
            let ext = mask.extent[i];
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let dot = sum((0..ext).map(|j| pr[j] * dr[j]));
            for j in 0..n {
                dr[j] = if j < ext { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
            }
        }
        let kh = View::cols(&c.k, n, d, h * dh, dh);
        let qh = View::cols(&c.q, n, d, h * dh, dh);
        gemm(T::one(), View::new(&dp, n, n), kh, T::zero(), &mut dq[h * dh..], d, 1);
        gemm(T::one(), View::new(&dp, n, n).t(), qh, T::zero(), &mut dk[h * dh..], d, 1);
    }
    let mut da = vec![T::zero(); n * d];
    acc_colsum(&dq, d, &mut gl.bq);
    acc_colsum(&dv, d, &mut gl.bv);
    for (dy, w, gw) in [(&dq, &lp.wq, &mut gl.wq), (&dk, &lp.wk, &mut gl.wk), (&dv, &lp.wv, &mut gl.wv)] {
        acc_tn(&c.a, n, d, dy, d, gw);
        gemm(T::one(), View::new(dy, n, d), View::new(w, d, d).t(), T::one(), &mut da, d, 1);
    }
    ln_backward(&da, &c.xhat1, &c.rstd1, &lp.ln1_g, d, dx, &mut gl.ln1_g, &mut gl.ln1_b);
}

/// Accumulates the gradient of `scale * sample_loss` into `grads`; returns the sample loss.
fn sample_grad<T: Scalar>(
    params: &ModelParameters<T>,
    sample: &MaskedSample,
    mask: &AttentionMask,
    scale: T,
    grads: &mut ModelParameters<T>,
) -> Result<f64> {
    check_inputs(params, &sample.input_tokens, mask)?;
    let cfg = &params.config;
    let d = cfg.d_model;
    let v = cfg.vocab;
    let n = sample.input_tokens.len();
    let masked: Vec<usize> = sample.masked_positions().collect();
    if masked.is_empty() {
        return Err(Error::NoMaskablePositions);
    }
    if let Some(&t) = sample.target_tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::InvalidTokenId { token: t, vocab: v });
    }
    let positions: Vec<usize> = (0..n).collect();
    let mut x = embed_rows(params, &sample.input_tokens, &positions);
    let caches: Vec<LayerCache<T>> =
        params.layers.iter().map(|lp| layer_forward(lp, cfg, &mut x, &positions, mask)).collect();

    let m = masked.len();
    let mut xm = Vec::with_capacity(m * d);
    for &r in &masked {
        xm.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    let mut hf = vec![T::zero(); m * d];
    let mut xhatf = vec![T::zero(); m * d];
    let rstdf = layer_norm(&xm, d, &params.lnf_g, &params.lnf_b, &mut hf, Some(&mut xhatf));
    let mut logits = linear(&hf, m, &params.w_head, &params.b_head, v);

    let inv_n = T::one() / T::lit(m as f64);
    let mut loss = 0.0f64;
    for (i, &r) in masked.iter().enumerate() {
        let row = &mut logits[i * v..(i + 1) * v];
        let target = sample.target_tokens[r] as usize;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let shifted_target = row[target] - max;
        let mut z = T::zero();
        for l in row.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        loss += (z.ln() - shifted_target).to_f64();
        let g = inv_n * scale / z;
        row.iter_mut().for_each(|l| *l *= g);
        row[target] -= inv_n * scale;
    }
    loss /= m as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    acc_tn(&hf, m, d, &logits, v, &mut grads.w_head);
    acc_colsum(&logits, v, &mut grads.b_head);
    let dhf = mul_nt(&logits, m, v, &params.w_head, d);
    let mut dxm = vec![T::zero(); m * d];
    ln_backward(&dhf, &xhatf, &rstdf, &params.lnf_g, d, &mut dxm, &mut grads.lnf_g, &mut grads.lnf_b);
    let mut dx = vec![T::zero(); n * d];
    for (i, &r) in masked.iter().enumerate() {
        dx[r * d..(r + 1) * d].copy_from_slice(&dxm[i * d..(i + 1) * d]);
    }
    for (l, c) in caches.iter().enumerate().rev() {
        layer_backward(&params.layers[l], &mut grads.layers[l], cfg, c, mask, &mut dx);
    }
    for (r, &t) in sample.input_tokens.iter().enumerate() {
        let t = t as usize;
        for j in 0..d {
            grads.tok_emb[t * d + j] += dx[r * d + j];
            grads.pos_emb[r * d + j] += dx[r * d + j];
        }
    }
    Ok(loss)
}

/// Mean masked cross-entropy over `batch` and its gradient.
///
/// Every sample shares the attention mask, so all inputs must have the same length.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &[MaskedSample],
    mask: &AttentionMask,
) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grads = ModelParameters::zeros(&params.config);
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut total = 0.0;
    for s in batch {
        total += sample_grad(params, s, mask, scale, &mut grads)?;
    }
    Ok(LossOutput { loss: total / batch.len() as f64, grads })
}
