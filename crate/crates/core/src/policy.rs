//! Closed-loop evaluation: the trained model as a simulator policy.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{decode_with_cache, CachePolicy};
use crate::decoder::{decode, token_agreement, DecodeConfig, DecodeOutput};
use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::simworld::{rollout, Action, Observation, Policy};
use crate::trainer::Codecs;

/// Decodes an action chunk from the current observation.
pub struct ModelPolicy<'a> {
    pub params: &'a ModelParameters<f32>,
    pub codecs: &'a Codecs,
    pub decode: DecodeConfig,
    pub cache: Option<CachePolicy>,
    /// Also run the uncached decode and record token agreement.
    pub compare: bool,
    pub chunk: usize,
    pub decode_ms: Vec<f64>,
    pub agreements: Vec<f64>,
    pub last: Option<DecodeOutput>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(params: &'a ModelParameters<f32>, codecs: &'a Codecs, decode: DecodeConfig, chunk: usize) -> Self {
        ModelPolicy {
            params,
            codecs,
            decode,
            cache: None,
            compare: false,
            chunk,
            decode_ms: Vec::new(),
            agreements: Vec::new(),
            last: None,
        }
    }

    pub fn with_cache(mut self, cache: Option<CachePolicy>, compare: bool) -> Self {
        self.cache = cache;
        self.compare = compare;
        self
    }
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<Vec<Action>> {
        let seq = self.codecs.encode_query(obs.image, obs.text, self.chunk, self.decode.variant.sequence_variant())?;
        let start = Instant::now();
        let out = match &self.cache {
            Some(policy) => decode_with_cache(&seq, self.params, &self.decode, policy)?.0,
            None => decode(&seq, self.params, &self.decode)?,
        };
        self.decode_ms.push(start.elapsed().as_secs_f64() * 1e3);
        if self.cache.is_some() && self.compare {
            let plain = decode(&seq, self.params, &self.decode)?;
            let gen = seq.generation_positions();
            let a: Vec<_> = gen.iter().map(|&p| out.tokens[p]).collect();
            let b: Vec<_> = gen.iter().map(|&p| plain.tokens[p]).collect();
            self.agreements.push(token_agreement(&a, &b));
        }
        let actions = self.codecs.decode_actions(&out.actions);
        self.last = Some(out);
        actions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
}

/// Runs one episode per seed. A decoded token outside the action range
/// (possible with unrestricted logits) ends that episode as a failure.
pub fn run_episodes<P: Policy + ?Sized>(policy: &mut P, seeds: &[u64], max_steps: usize) -> Result<Vec<EpisodeResult>> {
    seeds
        .iter()
        .map(|&seed| match rollout(policy, seed, max_steps) {
            Ok(o) => Ok(EpisodeResult { seed, success: o.success, steps: o.steps }),
            Err(Error::OutOfRangeToken { .. }) => Ok(EpisodeResult { seed, success: false, steps: max_steps }),
            Err(e) => Err(e),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub success_rate: f64,
    pub mean_steps: f64,
    pub decode_ms_mean: Option<f64>,
    pub cache_agreement: Option<f64>,
    pub episodes: Vec<EpisodeResult>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl RolloutSummary {
    pub fn new(episodes: Vec<EpisodeResult>, decode_ms: &[f64], agreements: &[f64]) -> Self {
        let n = episodes.len().max(1) as f64;
        RolloutSummary {
            success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
            mean_steps: episodes.iter().map(|e| e.steps as f64).sum::<f64>() / n,
            decode_ms_mean: mean(decode_ms),
            cache_agreement: mean(agreements),
            episodes,
        }
    }
}
