//! Tiny pre-norm transformer over the unified vocabulary.
//!
//! Parameters are generic over [`Scalar`] so the same code runs in `f32` for
//! training and decoding and in `f64` for gradient verification.

mod backward;
pub mod extended;
mod forward;
pub mod gradcheck;
pub mod linalg;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use backward::{loss_and_grad, LossOutput};
pub use forward::{
    attend_rows, embed_rows, ffn_rows, forward, forward_rows, head_rows, project_qkv, value_rows, ForwardOutput,
    LayerFeature, LayerFeatures, Restriction,
};
pub use linalg::Scalar;

use crate::sequence::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Hybrid,
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub attention_mode: AttentionMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            mlp_ratio: 4,
            max_seq: 224,
            vocab: 456,
            attention_mode: AttentionMode::Hybrid,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err("layers, d_model, heads and mlp_ratio must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.vocab == 0 || self.max_seq == 0 {
            return Err("vocab and max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

/// Weight-decay treatment and initialization family of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
    NormScale,
    NormBias,
}

impl TensorKind {
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Embedding | TensorKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub bv: Vec<T>,
    pub wo: Vec<T>,
    pub bo: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w_fc: Vec<T>,
    pub b_fc: Vec<T>,
    pub w_proj: Vec<T>,
    pub b_proj: Vec<T>,
}

impl<T> LayerParams<T> {
    fn tensors(&self) -> [&Vec<T>; 15] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<T>; 15] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

/// All learnable tensors. Matrices are row-major `in × out`, so `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub config: ModelConfig,
    pub tok_emb: Vec<T>,
    pub pos_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
    pub w_head: Vec<T>,
    pub b_head: Vec<T>,
}

/// Canonical tensor order shared by optimizer state, gradients and checkpoints.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let d = config.d_model;
    let ff = config.ff_dim();
    let v = config.vocab;
    let spec = |name: String, shape: Vec<usize>, kind| TensorSpec { name, shape, kind };
    let mut specs = vec![
        spec("tok_emb".into(), vec![v, d], TensorKind::Embedding),
        spec("pos_emb".into(), vec![config.max_seq, d], TensorKind::Embedding),
    ];
    for l in 0..config.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.extend([
            spec(p("ln1_g"), vec![d], TensorKind::NormScale),
            spec(p("ln1_b"), vec![d], TensorKind::NormBias),
            spec(p("wq"), vec![d, d], TensorKind::Weight),
            spec(p("bq"), vec![d], TensorKind::Bias),
            spec(p("wk"), vec![d, d], TensorKind::Weight),
            spec(p("wv"), vec![d, d], TensorKind::Weight),
            spec(p("bv"), vec![d], TensorKind::Bias),
            spec(p("wo"), vec![d, d], TensorKind::Weight),
            spec(p("bo"), vec![d], TensorKind::Bias),
            spec(p("ln2_g"), vec![d], TensorKind::NormScale),
            spec(p("ln2_b"), vec![d], TensorKind::NormBias),
            spec(p("w_fc"), vec![d, ff], TensorKind::Weight),
            spec(p("b_fc"), vec![ff], TensorKind::Bias),
            spec(p("w_proj"), vec![ff, d], TensorKind::Weight),
            spec(p("b_proj"), vec![d], TensorKind::Bias),
        ]);
    }
    specs.extend([
        spec("lnf_g".into(), vec![d], TensorKind::NormScale),
        spec("lnf_b".into(), vec![d], TensorKind::NormBias),
        spec("w_head".into(), vec![d, v], TensorKind::Weight),
        spec("b_head".into(), vec![v], TensorKind::Bias),
    ]);
    specs
}

impl<T: Scalar> ModelParameters<T> {
    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut tensors = tensor_specs(config).into_iter().map(|s| vec![T::zero(); s.shape.iter().product()]);
        let mut next = || tensors.next().unwrap();
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w_fc: next(),
                b_fc: next(),
                w_proj: next(),
                b_proj: next(),
            })
            .collect();
        ModelParameters {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g: next(),
            lnf_b: next(),
            w_head: next(),
            b_head: next(),
        }
    }

    /// Seeded init: N(0, 0.02) for embeddings and matrices, norm scales 1, biases 0.
    pub fn init(config: &ModelConfig) -> Self {
        Self::init_with_std(config, 0.02)
    }

    pub fn init_with_std(config: &ModelConfig, std: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, std).unwrap();
        let specs = tensor_specs(config);
        for (spec, t) in specs.iter().zip(p.tensors_mut()) {
            match spec.kind {
                TensorKind::Embedding | TensorKind::Weight => {
                    t.iter_mut().for_each(|x| *x = T::lit(normal.sample(&mut rng)));
                }
                TensorKind::NormScale => t.iter_mut().for_each(|x| *x = T::one()),
                TensorKind::Bias | TensorKind::NormBias => {}
            }
        }
        p
    }

    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_head, &self.b_head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_head, &mut self.b_head]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        let mut out = ModelParameters::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = U::lit(s.to_f64()));
        }
        out
    }
}

/// Query × key visibility matrix (`true` = may attend).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    pub allow: Vec<bool>,
    /// One past the last visible key per query row.
    pub extent: Vec<usize>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = vec![false; n * n];
        let mut extent = vec![0; n];
        for i in 0..n {
            for j in 0..n {
                if f(i, j) {
                    allow[i * n + j] = true;
                    extent[i] = j + 1;
                }
            }
        }
        AttentionMask { n, allow, extent }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }
}

/// Hybrid: a query sees every key whose block is not later than its own.
/// Delimiters belong to the block they wrap.
pub fn build_attention_mask(segments: &[Segment], mode: AttentionMode) -> AttentionMask {
    let n = segments.iter().map(|s| s.span.end).max().unwrap_or(0);
    let mut block = vec![0usize; n];
    for (b, s) in segments.iter().enumerate() {
        for i in s.span.clone() {
            block[i] = b;
        }
    }
    match mode {
        AttentionMode::Hybrid => AttentionMask::from_fn(n, |i, j| block[j] <= block[i]),
        AttentionMode::Causal => AttentionMask::from_fn(n, |i, j| j <= i),
        AttentionMode::Bidirectional => AttentionMask::from_fn(n, |_, _| true),
    }
}
