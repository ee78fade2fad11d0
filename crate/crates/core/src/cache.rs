//! Feature caching for decode: a write-once instruction span, interval
//! refreshes, and value-similarity selective recomputation in between.

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_with, DecodeConfig, DecodeOutput, LogitSource, StepCost};
use crate::error::{Error, Result};
use crate::model::{
    attend_rows, build_attention_mask, embed_rows, ffn_rows, forward_rows, head_rows, project_qkv, value_rows,
    AttentionMask, LayerFeature, ModelParameters, Scalar,
};
use crate::sequence::AssembledSequence;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CachePolicy {
    pub refresh_interval: usize,
    pub update_ratio: f64,
}

impl Default for CachePolicy {
    fn default() -> Self {
        CachePolicy { refresh_interval: 6, update_ratio: 0.25 }
    }
}

impl CachePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.refresh_interval == 0 {
            return Err(Error::Config("cache.refresh_interval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.update_ratio) {
            return Err(Error::Config("cache.update_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_refresh(&self, s: usize) -> bool {
        s == 1 || (s - 1).is_multiple_of(self.refresh_interval)
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Indices (into `0..n_prime`) of the `floor(rho * n_prime)` rows with the
/// lowest layer-averaged cosine similarity, ties to the lower index.
///
/// `current[l]` and `cached[l]` hold `n_prime × d` value rows for layer `l`.
pub fn select_stale<T: Scalar>(
    current: &[Vec<T>],
    cached: &[Vec<T>],
    d: usize,
    rho: f64,
    n_prime: usize,
) -> Vec<usize> {
    let k = ((rho * n_prime as f64).floor() as usize).min(n_prime);
    if k == 0 {
        return Vec::new();
    }
    let layers = current.len().max(1) as f64;
    let sims: Vec<f64> = (0..n_prime)
        .map(|i| {
            let r = i * d..(i + 1) * d;
            current.iter().zip(cached).map(|(c, o)| cosine(&c[r.clone()], &o[r.clone()])).sum::<f64>() / layers
        })
        .collect();
    let mut order: Vec<usize> = (0..n_prime).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub steps: usize,
    pub refreshes: usize,
    pub partial_steps: usize,
    /// Selected payload tokens recomputed on non-refresh steps.
    pub recomputed_tokens: usize,
    /// Generation-span delimiter rows recomputed alongside a selection.
    pub delimiter_rows: usize,
    pub cache_hits: usize,
    pub instruction_writes: usize,
}

/// Per-session feature store, exclusively owned by one decode.
pub struct SessionCache<'a, T> {
    params: &'a ModelParameters<T>,
    policy: CachePolicy,
    mask: AttentionMask,
    instruction_len: usize,
    /// Sequence positions of the generation payload.
    payload: Vec<usize>,
    /// Generation-span delimiter positions.
    delimiters: Vec<usize>,
    layers: Vec<LayerFeature<T>>,
    /// Steps since the last refresh.
    pub age: usize,
    s: usize,
    pub stats: CacheStats,
}

impl<'a, T: Scalar> SessionCache<'a, T> {
    pub fn new(params: &'a ModelParameters<T>, seq: &AssembledSequence, policy: CachePolicy) -> Result<Self> {
        policy.validate()?;
        let instruction_len = seq.instruction_len();
        let payload = seq.generation_positions();
        let delimiters = (instruction_len..seq.len()).filter(|p| !payload.contains(p)).collect();
        Ok(SessionCache {
            params,
            policy,
            mask: build_attention_mask(&seq.segments, params.config.attention_mode),
            instruction_len,
            payload,
            delimiters,
            layers: Vec::new(),
            age: 0,
            s: 0,
            stats: CacheStats::default(),
        })
    }

    /// Cached features of the instruction span, layer by layer.
    pub fn instruction_features(&self) -> Vec<LayerFeature<T>> {
        let d = self.params.config.d_model;
        let r = 0..self.instruction_len * d;
        self.layers
            .iter()
            .map(|f| LayerFeature {
                keys: f.keys[r.clone()].to_vec(),
                values: f.values[r.clone()].to_vec(),
                attn_out: f.attn_out[r.clone()].to_vec(),
                ffn_out: f.ffn_out[r.clone()].to_vec(),
            })
            .collect()
    }

    fn refresh(&mut self, tokens: &[TokenId], rows: &[usize]) -> Result<Vec<T>> {
        let out = forward_rows(self.params, tokens, &self.mask, rows, true)?;
        let fresh = out.features.expect("features were requested").layers;
        if self.layers.is_empty() {
            self.layers = fresh;
            self.stats.instruction_writes += 1;
        } else {
            let from = self.instruction_len * self.params.config.d_model;
            for (dst, src) in self.layers.iter_mut().zip(fresh) {
                dst.keys[from..].copy_from_slice(&src.keys[from..]);
                dst.values[from..].copy_from_slice(&src.values[from..]);
                dst.attn_out[from..].copy_from_slice(&src.attn_out[from..]);
                dst.ffn_out[from..].copy_from_slice(&src.ffn_out[from..]);
            }
        }
        Ok(out.logits)
    }

    /// Residual entering layer `l` for `positions`, rebuilt from `emb` and
    /// cached block outputs in forward order.
    fn cached_residual(&self, emb: &[T], positions: &[usize], upto: usize) -> Vec<T> {
        let d = self.params.config.d_model;
        let mut x = emb.to_vec();
        for f in &self.layers[..upto] {
            for (r, &p) in positions.iter().enumerate() {
                for j in 0..d {
                    x[r * d + j] += f.attn_out[p * d + j];
                }
                for j in 0..d {
                    x[r * d + j] += f.ffn_out[p * d + j];
                }
            }
        }
        x
    }

    fn partial(&mut self, tokens: &[TokenId], rows: &[usize]) -> Result<(Vec<T>, StepCost)> {
        let params = self.params;
        let cfg = &params.config;
        let d = cfg.d_model;
        let n = tokens.len();
        let n_prime = self.payload.len();
        let payload_tokens: Vec<TokenId> = self.payload.iter().map(|&p| tokens[p]).collect();
        let emb = embed_rows(params, &payload_tokens, &self.payload);

        let mut current = Vec::with_capacity(self.layers.len());
        let mut cached = Vec::with_capacity(self.layers.len());
        for (l, lp) in params.layers.iter().enumerate() {
            let x = self.cached_residual(&emb, &self.payload, l);
            current.push(value_rows(lp, d, &x));
            let mut old = Vec::with_capacity(n_prime * d);
            for &p in &self.payload {
                old.extend_from_slice(&self.layers[l].values[p * d..(p + 1) * d]);
            }
            cached.push(old);
        }
        let picked = select_stale(&current, &cached, d, self.policy.update_ratio, n_prime);

        let mut recompute: Vec<usize> = picked.iter().map(|&i| self.payload[i]).collect();
        let delimiter_rows = if recompute.is_empty() { 0 } else { self.delimiters.len() };
        if delimiter_rows > 0 {
            recompute.extend_from_slice(&self.delimiters);
            recompute.sort_unstable();
        }

        if !recompute.is_empty() {
            let rt: Vec<TokenId> = recompute.iter().map(|&p| tokens[p]).collect();
            let mut x = embed_rows(params, &rt, &recompute);
            for (l, lp) in params.layers.iter().enumerate() {
                let (q, k, v) = project_qkv(lp, d, &x);
                for (r, &p) in recompute.iter().enumerate() {
                    self.layers[l].keys[p * d..(p + 1) * d].copy_from_slice(&k[r * d..(r + 1) * d]);
                    self.layers[l].values[p * d..(p + 1) * d].copy_from_slice(&v[r * d..(r + 1) * d]);
                }
                let feat = &self.layers[l];
                let o = attend_rows(lp, cfg, &q, &recompute, &feat.keys, &feat.values, &self.mask);
                x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
                let f = ffn_rows(lp, cfg, &x);
                x.iter_mut().zip(&f).for_each(|(a, &b)| *a += b);
                for (r, &p) in recompute.iter().enumerate() {
                    self.layers[l].attn_out[p * d..(p + 1) * d].copy_from_slice(&o[r * d..(r + 1) * d]);
                    self.layers[l].ffn_out[p * d..(p + 1) * d].copy_from_slice(&f[r * d..(r + 1) * d]);
                }
            }
        }

        let rt: Vec<TokenId> = rows.iter().map(|&p| tokens[p]).collect();
        let e = embed_rows(params, &rt, rows);
        let hidden = self.cached_residual(&e, rows, self.layers.len());
        let logits = head_rows(params, &hidden);

        self.stats.recomputed_tokens += picked.len();
        self.stats.delimiter_rows += delimiter_rows;
        let cost = StepCost { recomputed_tokens: picked.len(), cache_hits: n - recompute.len() };
        Ok((logits, cost))
    }
}

impl<T: Scalar> LogitSource for SessionCache<'_, T> {
    fn begin_phase(&mut self) {
        self.s = 0;
    }

    fn logits(&mut self, tokens: &[TokenId], rows: &[usize]) -> Result<(Vec<f32>, StepCost)> {
        self.s += 1;
        self.stats.steps += 1;
        let (logits, cost) = if self.policy.is_refresh(self.s) {
            self.stats.refreshes += 1;
            self.age = 0;
            (self.refresh(tokens, rows)?, StepCost { recomputed_tokens: tokens.len(), cache_hits: 0 })
        } else {
            self.stats.partial_steps += 1;
            self.age = (self.s - 1) % self.policy.refresh_interval;
            self.partial(tokens, rows)?
        };
        self.stats.cache_hits += cost.cache_hits;
        Ok((logits.iter().map(|x| x.to_f64() as f32).collect(), cost))
    }
}

/// Cached decode; denoising logic is identical to [`crate::decoder::decode`].
pub fn decode_with_cache<T: Scalar>(
    seq: &AssembledSequence,
    params: &ModelParameters<T>,
    cfg: &DecodeConfig,
    policy: &CachePolicy,
) -> Result<(DecodeOutput, CacheStats)> {
    let mut cache = SessionCache::new(params, seq, *policy)?;
    let out = decode_with(seq, cfg, &mut cache)?;
    Ok((out, cache.stats))
}
