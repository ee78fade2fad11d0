//! Windowing, tokenization and the masked-denoising training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_attention_mask, loss_and_grad, tensor_specs, AttentionMask, ModelConfig, ModelParameters, Scalar,
};
use crate::sequence::{apply_mask, assemble, sample_mask_ratio, AssembledSequence, MaskedSample, SequenceVariant};
use crate::simworld::{self, Action, RandomPolicy, Trajectory, TrajectoryStep, ACTION_DIMS};
use crate::vocab::{ActionBinner, ImageCodec, Modality, RgbImage, TextCodec, TokenId, VocabLayout, MASK};

pub const ADAM_EPS: f64 = 1e-8;
/// Gradient shards per batch. Fixed so the reduction order does not depend
/// on the thread count.
const GRAD_SHARDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub betas: (f64, f64),
    pub chunk_size: usize,
    pub seed: u64,
    pub variant: SequenceVariant,
    /// Caps the number of optimizer steps (the schedule is laid out over the cap).
    pub max_steps: Option<usize>,
    /// Random-policy episodes used for an optional pretraining phase.
    pub pretrain_episodes: usize,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 20,
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.01,
            betas: (0.9, 0.999),
            chunk_size: 5,
            seed: 0,
            variant: SequenceVariant::Full,
            max_steps: None,
            pretrain_episodes: 0,
            pretrain_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("train.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("train.warmup_ratio must be in [0, 1)");
        }
        if self.chunk_size == 0 || self.batch_size == 0 {
            return bad("train.chunk_size and train.batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("train.betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub patch: usize,
    pub codebook_size: usize,
    pub text_len: usize,
    /// Frames sampled for k-means.
    pub kmeans_frames: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { patch: 4, codebook_size: 64, text_len: 64, kmeans_frames: 2000, seed: 0 }
    }
}

/// Tokenizers fitted to one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codecs {
    pub layout: VocabLayout,
    pub text: TextCodec,
    pub image: ImageCodec,
    pub binner: ActionBinner,
}

impl Codecs {
    pub fn fit(trajectories: &[Trajectory], cfg: &CodecConfig) -> Result<Self> {
        let frames: Vec<&RgbImage> = trajectories.iter().flat_map(|t| t.steps.iter().map(|s| &s.image)).collect();
        if frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let picked: Vec<&RgbImage> = if frames.len() > cfg.kmeans_frames {
            let mut idx = rand::seq::index::sample(&mut rng, frames.len(), cfg.kmeans_frames).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| frames[i]).collect()
        } else {
            frames
        };
        let layout = VocabLayout::with_codebook(cfg.codebook_size as u32);
        let image = ImageCodec::fit(layout.image_offset, &picked, cfg.patch, cfg.codebook_size, cfg.seed)?;
        let actions: Vec<&Action> = trajectories.iter().flat_map(|t| t.steps.iter().map(|s| &s.action)).collect();
        let binner = ActionBinner::fit(layout.action_offset, &actions, ACTION_DIMS)?;
        Ok(Codecs { layout, text: layout.text_codec(cfg.text_len), image, binner })
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.size()
    }

    pub fn sequence_len(&self, chunk: usize, variant: SequenceVariant) -> usize {
        let img = self.image.tokens_per_image();
        crate::sequence::sequence_len(img, self.text.max_len, img, chunk * ACTION_DIMS, variant)
    }

    /// Training sequence with ground-truth goal and actions.
    pub fn encode_sample(&self, s: &TrainSample, variant: SequenceVariant) -> Result<AssembledSequence> {
        let obs = self.image.encode(&s.obs)?;
        let goal = self.image.encode(&s.goal)?;
        let acts = self.binner.encode_chunk(&s.actions)?;
        assemble(&self.layout, &obs, &self.text.encode(&s.text)?, &goal, &acts, variant)
    }

    /// Inference sequence with every generation payload set to MASK.
    pub fn encode_query(
        &self,
        image: &RgbImage,
        text: &str,
        chunk: usize,
        variant: SequenceVariant,
    ) -> Result<AssembledSequence> {
        let obs = self.image.encode(image)?;
        let goal = vec![MASK; self.image.tokens_per_image()];
        let acts = vec![MASK; chunk * ACTION_DIMS];
        assemble(&self.layout, &obs, &self.text.encode(text)?, &goal, &acts, variant)
    }

    pub fn decode_actions(&self, tokens: &[TokenId]) -> Result<Vec<Action>> {
        let range = self.layout.range(Modality::Action);
        if let Some(&t) = tokens.iter().find(|t| !range.contains(t)) {
            return Err(Error::OutOfRangeToken { token: t, expected: "action" });
        }
        Ok(self.binner.decode_chunk(tokens)?.into_iter().map(|a| [a[0], a[1], a[2]]).collect())
    }
}

/// One (o_t, l, o_{t+k}, a_{t..t+k-1}) window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub episode_id: usize,
    pub step: usize,
    pub goal_step: usize,
    pub obs: RgbImage,
    pub text: String,
    pub goal: RgbImage,
    pub actions: Vec<Action>,
}

/// Start steps `t` with `t + k <= L - 1`.
pub fn window_starts(len: usize, k: usize) -> Result<std::ops::Range<usize>> {
    if len < k + 1 {
        return Err(Error::EpisodeTooShort { len, chunk: k });
    }
    Ok(0..len - k)
}

fn sample_at(t: &Trajectory, s: usize, k: usize) -> TrainSample {
    let step: &TrajectoryStep = &t.steps[s];
    TrainSample {
        episode_id: t.episode_id,
        step: s,
        goal_step: s + k,
        obs: step.image.clone(),
        text: format!("{} {}", t.spec.instruction, step.proprio),
        goal: t.steps[s + k].image.clone(),
        actions: t.steps[s..s + k].iter().map(|x| x.action).collect(),
    }
}

pub fn window_dataset(trajectories: &[Trajectory], k: usize) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for t in trajectories {
        out.extend(window_starts(t.len(), k)?.map(|s| sample_at(t, s, k)));
    }
    Ok(out)
}

/// Tokenized training sequence with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub episode_id: usize,
    pub step: usize,
    pub seq: AssembledSequence,
}

/// Windows and tokenizes every episode without materializing image copies.
pub fn encode_dataset(
    trajectories: &[Trajectory],
    codecs: &Codecs,
    k: usize,
    variant: SequenceVariant,
) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::new();
    for t in trajectories {
        let starts = window_starts(t.len(), k)?;
        let frames = t.steps.iter().map(|s| codecs.image.encode(&s.image)).collect::<Result<Vec<_>>>()?;
        for s in starts {
            let text = codecs.text.encode(&format!("{} {}", t.spec.instruction, t.steps[s].proprio))?;
            let acts: Vec<&Action> = t.steps[s..s + k].iter().map(|x| &x.action).collect();
            let acts = codecs.binner.encode_chunk(&acts)?;
            let seq = assemble(&codecs.layout, &frames[s], &text, &frames[s + k], &acts, variant)?;
            out.push(EncodedSample { episode_id: t.episode_id, step: s, seq });
        }
    }
    Ok(out)
}

/// Random-policy episodes for the optional pretraining phase.
pub fn random_corpus(n: usize, seed: u64, len: usize) -> Vec<Trajectory> {
    (0..n)
        .map(|i| {
            let ep_seed = seed.wrapping_add(i as u64);
            let (mut state, spec) = simworld::reset(ep_seed);
            let mut policy = RandomPolicy::new(ep_seed ^ 0x5eed, 1);
            let mut steps = Vec::with_capacity(len);
            for _ in 0..len {
                let image = simworld::render(&state);
                let obs = simworld::Observation { image: &image, text: "", state: &state, spec: &spec };
                let action = simworld::Policy::act(&mut policy, &obs).expect("random policy is infallible")[0];
                steps.push(TrajectoryStep { image, proprio: simworld::proprio_text(&state), action });
                state = simworld::step(&state, &action);
            }
            let success = simworld::is_success(&state, &spec);
            Trajectory { episode_id: i, spec, steps, success }
        })
        .collect()
}

/// Linear warmup over `ceil(warmup_ratio * total)` steps, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup_ratio * total as f64).ceil() as usize;
    if step < warm || (warm > 0 && warm >= total) {
        return cfg.lr * step.min(warm) as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (total - warm).max(1) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Adam moments and step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: ModelParameters<T>,
    pub v: ModelParameters<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: &ModelConfig) -> Self {
        AdamState { m: ModelParameters::zeros(config), v: ModelParameters::zeros(config), t: 0 }
    }
}

/// One AdamW update at learning rate `lr`.
pub fn optimizer_step<T: Scalar>(
    params: &mut ModelParameters<T>,
    grads: &ModelParameters<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let specs = tensor_specs(&params.config);
    for (spec, g) in specs.iter().zip(grads.tensors()) {
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: spec.name.clone() });
        }
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let (b1t, b2t, ob1, ob2) = (T::lit(b1), T::lit(b2), T::lit(1.0 - b1), T::lit(1.0 - b2));
    let step = T::lit(lr / c1);
    let inv_c2 = T::lit(1.0 / c2);
    let eps = T::lit(ADAM_EPS);
    let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for ((spec, (p, g)), (m, v)) in specs.iter().zip(tensors).zip(moments) {
        let decays = spec.kind.decays() && cfg.weight_decay != 0.0;
        for i in 0..p.len() {
            if decays {
                p[i] *= decay;
            }
            m[i] = b1t * m[i] + ob1 * g[i];
            v[i] = b2t * v[i] + ob2 * g[i] * g[i];
            p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub mask_ratio: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,loss,mask_ratio,lr";

pub fn write_log<W: Write>(rows: &[LogRow], mut w: W) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.mask_ratio, r.lr)?;
    }
    Ok(())
}

/// Loss and gradient over fixed contiguous shards, reduced in shard order.
pub fn sharded_loss_and_grad(
    params: &ModelParameters<f32>,
    batch: &[MaskedSample],
    mask: &AttentionMask,
) -> Result<(f64, ModelParameters<f32>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per = batch.len().div_ceil(GRAD_SHARDS);
    let parts: Vec<_> = batch.par_chunks(per).map(|c| loss_and_grad(params, c, mask).map(|o| (c.len(), o))).collect();
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = ModelParameters::<f32>::zeros(&params.config);
    for part in parts {
        let (n, out) = part?;
        let w = n as f64 / b;
        loss += w * out.loss;
        for (dst, src) in grads.tensors_mut().into_iter().zip(out.grads.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += (w as f32) * s);
        }
    }
    Ok((loss, grads))
}

/// Stateful optimizer loop over pre-assembled sequences.
pub struct Trainer {
    pub params: ModelParameters<f32>,
    pub adam: AdamState<f32>,
    pub cfg: TrainConfig,
    pub total_steps: usize,
    pub step: usize,
    pub log: Vec<LogRow>,
    rng: ChaCha8Rng,
    mask: Option<(usize, AttentionMask)>,
}

impl Trainer {
    pub fn new(params: ModelParameters<f32>, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&params.config);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { params, adam, cfg, total_steps, step: 0, log: Vec::new(), rng, mask: None })
    }

    fn mask_for(&mut self, seq: &AssembledSequence) -> &AttentionMask {
        let stale = self.mask.as_ref().is_none_or(|(n, _)| *n != seq.len());
        if stale {
            self.mask = Some((seq.len(), build_attention_mask(&seq.segments, self.params.config.attention_mode)));
        }
        &self.mask.as_ref().expect("mask was just built").1
    }

    /// One optimizer step on `batch` (one mask ratio for the whole batch).
    pub fn train_step(&mut self, batch: &[&AssembledSequence]) -> Result<LogRow> {
        let first = batch.first().ok_or(Error::EmptyDataset)?;
        if let Some(s) = batch.iter().find(|s| s.len() != first.len()) {
            return Err(Error::DimensionMismatch { expected: first.len(), got: s.len() });
        }
        let ratio = sample_mask_ratio(&mut self.rng);
        let masked = batch.iter().map(|s| apply_mask(s, ratio, &mut self.rng)).collect::<Result<Vec<_>>>()?;
        let mask = self.mask_for(first).clone();
        let (loss, grads) = sharded_loss_and_grad(&self.params, &masked, &mask)?;
        self.step += 1;
        let lr = lr_at(self.step, self.total_steps, &self.cfg);
        optimizer_step(&mut self.params, &grads, &mut self.adam, lr, &self.cfg)?;
        let row = LogRow { step: self.step, loss, mask_ratio: ratio, lr };
        self.log.push(row);
        Ok(row)
    }

    /// Shuffled minibatches for `epochs` passes, stopping at `total_steps`.
    pub fn run_epochs(
        &mut self,
        data: &[AssembledSequence],
        epochs: usize,
        observe: &mut dyn FnMut(&LogRow),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                if self.step >= self.total_steps {
                    return Ok(());
                }
                let batch: Vec<&AssembledSequence> = chunk.iter().map(|&i| &data[i]).collect();
                let row = self.train_step(&batch)?;
                observe(&row);
            }
        }
        Ok(())
    }
}

pub fn steps_for(samples: usize, epochs: usize, cfg: &TrainConfig) -> usize {
    let n = epochs * samples.div_ceil(cfg.batch_size);
    cfg.max_steps.map_or(n, |m| m.min(n))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters<f32>,
    pub log: Vec<LogRow>,
}

/// Fine-tunes a freshly initialized model on `data`, optionally after a
/// pretraining pass over `pretrain` (its own schedule and fresh moments).
pub fn train(
    data: &[AssembledSequence],
    pretrain: &[AssembledSequence],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(data, pretrain, model, cfg, |_| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_observed(
    data: &[AssembledSequence],
    pretrain: &[AssembledSequence],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    model.validate().map_err(Error::Config)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = ModelParameters::<f32>::init(model);
    let mut log = Vec::new();
    if !pretrain.is_empty() {
        let mut pcfg = cfg.clone();
        pcfg.seed = cfg.seed.wrapping_add(1);
        pcfg.max_steps = None;
        let total = steps_for(pretrain.len(), cfg.pretrain_epochs, &pcfg);
        let mut t = Trainer::new(params, pcfg, total)?;
        t.run_epochs(pretrain, cfg.pretrain_epochs, &mut observe)?;
        params = t.params;
        log = t.log;
    }
    let offset = log.len();
    let mut t = Trainer::new(params, cfg.clone(), steps_for(data.len(), cfg.epochs, cfg))?;
    let mut shifted = |r: &LogRow| observe(&LogRow { step: r.step + offset, ..*r });
    t.run_epochs(data, cfg.epochs, &mut shifted)?;
    log.extend(t.log.into_iter().map(|r| LogRow { step: r.step + offset, ..r }));
    Ok(TrainOutcome { params: t.params, log })
}
