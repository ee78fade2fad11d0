//! Iterative parallel denoising with confidence-based remasking.

use std::f64::consts::FRAC_PI_2;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_attention_mask, forward_rows, AttentionMask, ModelParameters, Scalar};
use crate::sequence::{parse_generation, AssembledSequence, SegmentKind, SequenceVariant};
use crate::vocab::{TokenId, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeVariant {
    #[default]
    Parallel,
    Sequential,
    NoWorldModel,
}

impl DecodeVariant {
    pub fn sequence_variant(self) -> SequenceVariant {
        match self {
            DecodeVariant::NoWorldModel => SequenceVariant::NoWorldModel,
            _ => SequenceVariant::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub steps: usize,
    pub temperature: f64,
    pub variant: DecodeVariant,
    pub restrict_logits: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { steps: 24, temperature: 1.0, variant: DecodeVariant::Parallel, restrict_logits: true }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("decode.steps must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("decode.temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Unclamped schedule value `floor(n' * sin(pi/2 * (d-1)/D))`.
pub fn schedule_value(d: usize, total: usize, n_prime: usize) -> usize {
    let r = (d as f64 - 1.0) / total as f64;
    (n_prime as f64 * (FRAC_PI_2 * r).sin()).floor() as usize
}

/// Tokens left masked after the transition at step `d`: the schedule value,
/// capped so at least one token commits.
pub fn remask_count(d: usize, total: usize, n_prime: usize, current_masked: usize) -> usize {
    schedule_value(d, total, n_prime).min(current_masked.saturating_sub(1))
}

/// Expected masked-count trace `[n', beta_D, ..., beta_1]` for a fresh decode.
pub fn expected_trace(n_prime: usize, total: usize) -> Vec<usize> {
    let mut out = vec![n_prime];
    let mut masked = n_prime;
    for d in (1..=total).rev() {
        masked = remask_count(d, total, n_prime, masked);
        out.push(masked);
    }
    out
}

/// Denoising state over the positions of one schedule phase.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseState {
    pub tokens: Vec<TokenId>,
    /// Sequence positions scheduled in this phase.
    pub positions: Vec<usize>,
    pub committed: Vec<bool>,
    pub confidences: Vec<f64>,
    pub d: usize,
    pub n_prime: usize,
}

impl DenoiseState {
    pub fn masked(&self) -> usize {
        self.committed.iter().filter(|&&c| !c).count()
    }
}

/// Sets every generation payload token to MASK.
pub fn init_state(seq: &AssembledSequence, cfg: &DecodeConfig) -> DenoiseState {
    let mut tokens = seq.tokens.clone();
    let positions = seq.generation_positions();
    for &p in &positions {
        tokens[p] = MASK;
    }
    let n = positions.len();
    DenoiseState { tokens, positions, committed: vec![false; n], confidences: vec![0.0; n], d: cfg.steps, n_prime: n }
}

/// Greedy prediction `(id, softmax(logits / T)[id])` over `range`.
pub fn predict(logits: &[f32], range: &Range<TokenId>, temperature: f64) -> (TokenId, f64) {
    let mut best = range.start;
    let mut max = f32::NEG_INFINITY;
    for t in range.clone() {
        if t == MASK {
            continue;
        }
        let l = logits[t as usize];
        if l > max || best == MASK {
            max = l;
            best = t;
        }
    }
    let m = max as f64 / temperature;
    let z: f64 =
        range.clone().filter(|&t| t != MASK).map(|t| (logits[t as usize] as f64 / temperature - m).exp()).sum();
    (best, 1.0 / z)
}

/// Source of logits for the currently masked rows.
pub trait LogitSource {
    /// Called before each schedule phase.
    fn begin_phase(&mut self) {}
    /// `rows.len() × vocab` logits plus work accounting for this step.
    fn logits(&mut self, tokens: &[TokenId], rows: &[usize]) -> Result<(Vec<f32>, StepCost)>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    pub recomputed_tokens: usize,
    pub cache_hits: usize,
}

/// Plain full forward pass every step.
pub struct Uncached<'a, T> {
    pub params: &'a ModelParameters<T>,
    pub mask: AttentionMask,
}

impl<'a, T: Scalar> Uncached<'a, T> {
    pub fn new(params: &'a ModelParameters<T>, seq: &AssembledSequence) -> Self {
        Uncached { params, mask: build_attention_mask(&seq.segments, params.config.attention_mode) }
    }
}

impl<T: Scalar> LogitSource for Uncached<'_, T> {
    fn logits(&mut self, tokens: &[TokenId], rows: &[usize]) -> Result<(Vec<f32>, StepCost)> {
        let out = forward_rows(self.params, tokens, &self.mask, rows, false)?;
        let logits = out.logits.iter().map(|x| x.to_f64() as f32).collect();
        Ok((logits, StepCost { recomputed_tokens: tokens.len(), cache_hits: 0 }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 1-based across all phases.
    pub step: usize,
    pub d: usize,
    /// Masked generation tokens after this step (all phases counted).
    pub masked_count: usize,
    pub committed_this_step: usize,
    pub recomputed_tokens: usize,
    pub cache_hits: usize,
    pub agreement_with_uncached: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrace {
    pub kinds: Vec<SegmentKind>,
    pub n_prime: usize,
    /// `[n', masked after step D, ..., masked after step 1]`.
    pub masked_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub initial_masked: usize,
    pub rows: Vec<TraceRow>,
    pub phases: Vec<PhaseTrace>,
    /// Generation payload tokens after each step.
    pub snapshots: Vec<Vec<TokenId>>,
}

pub const TRACE_HEADER: &str =
    "step,d,masked_count,committed_this_step,recomputed_tokens,cache_hits,agreement_with_uncached";

impl DecodeTrace {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            let agree = r.agreement_with_uncached.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step, r.d, r.masked_count, r.committed_this_step, r.recomputed_tokens, r.cache_hits, agree
            )?;
        }
        Ok(())
    }

    /// Fills `agreement_with_uncached` per step from a reference trace.
    pub fn annotate_agreement(&mut self, reference: &DecodeTrace) {
        for (row, (a, b)) in self.rows.iter_mut().zip(self.snapshots.iter().zip(&reference.snapshots)) {
            row.agreement_with_uncached = Some(token_agreement(a, b));
        }
    }
}

pub fn token_agreement(a: &[TokenId], b: &[TokenId]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub goal: Option<Vec<TokenId>>,
    pub actions: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub trace: DecodeTrace,
}

fn check_variant(seq: &AssembledSequence, cfg: &DecodeConfig) -> Result<()> {
    cfg.validate()?;
    if seq.variant != cfg.variant.sequence_variant() {
        return Err(Error::Config(format!(
            "decode variant {:?} needs a {:?} sequence, got {:?}",
            cfg.variant,
            cfg.variant.sequence_variant(),
            seq.variant
        )));
    }
    Ok(())
}

fn phases(seq: &AssembledSequence, variant: DecodeVariant) -> Vec<Vec<SegmentKind>> {
    match variant {
        DecodeVariant::Sequential => vec![vec![SegmentKind::Goal], vec![SegmentKind::Action]],
        DecodeVariant::Parallel => vec![vec![SegmentKind::Goal, SegmentKind::Action]],
        DecodeVariant::NoWorldModel => {
            debug_assert!(seq.segment(SegmentKind::Goal).is_none());
            vec![vec![SegmentKind::Action]]
        }
    }
}

/// One transition: predict masked rows, then remask the lowest-confidence ones.
/// Returns the number of tokens committed.
pub fn denoise_step(
    state: &mut DenoiseState,
    logits: &[f32],
    restrictions: &[Range<TokenId>],
    cfg: &DecodeConfig,
) -> usize {
    let vocab = logits.len() / state.masked().max(1);
    let before = state.masked();
    let mut preds: Vec<(usize, TokenId)> = Vec::with_capacity(before);
    let mut row = 0;
    for (i, range) in restrictions.iter().enumerate().take(state.positions.len()) {
        if state.committed[i] {
            state.confidences[i] = f64::INFINITY;
            continue;
        }
        let (tok, conf) = predict(&logits[row * vocab..(row + 1) * vocab], range, cfg.temperature);
        state.confidences[i] = conf;
        preds.push((i, tok));
        row += 1;
    }
    let beta = remask_count(state.d, cfg.steps, state.n_prime, before);
    let mut order: Vec<usize> = (0..state.positions.len()).collect();
    order.sort_by(|&a, &b| state.confidences[a].total_cmp(&state.confidences[b]).then(a.cmp(&b)));
    let mut remask = vec![false; state.positions.len()];
    for &i in &order[..beta] {
        remask[i] = true;
    }
    for (i, tok) in preds {
        if !remask[i] {
            state.committed[i] = true;
            state.tokens[state.positions[i]] = tok;
        }
    }
    state.d -= 1;
    before - state.masked()
}

/// Runs the configured schedule against any logit source.
pub fn decode_with<S: LogitSource>(
    seq: &AssembledSequence,
    cfg: &DecodeConfig,
    source: &mut S,
) -> Result<DecodeOutput> {
    check_variant(seq, cfg)?;
    let layout = seq.layout;
    let base = init_state(seq, cfg);
    let gen = base.positions.clone();
    let mut tokens = base.tokens;
    let kinds = seq.position_kinds();
    let vocab_all = 0..layout.total_size;
    let mut trace =
        DecodeTrace { initial_masked: gen.len(), rows: Vec::new(), phases: Vec::new(), snapshots: Vec::new() };
    let mut remaining = gen.len();
    for phase in phases(seq, cfg.variant) {
        let positions: Vec<usize> = gen.iter().copied().filter(|&p| phase.contains(&kinds[p])).collect();
        let restrictions: Vec<Range<TokenId>> = positions
            .iter()
            .map(|&p| if cfg.restrict_logits { layout.range(kinds[p].modality()) } else { vocab_all.clone() })
            .collect();
        let n = positions.len();
        let mut state = DenoiseState {
            tokens,
            positions,
            committed: vec![false; n],
            confidences: vec![0.0; n],
            d: cfg.steps,
            n_prime: n,
        };
        let mut masked_counts = vec![n];
        source.begin_phase();
        while state.d >= 1 {
            let rows: Vec<usize> =
                state.positions.iter().zip(&state.committed).filter(|(_, &c)| !c).map(|(&p, _)| p).collect();
            let (logits, cost) = if rows.is_empty() {
                (Vec::new(), StepCost::default())
            } else {
                source.logits(&state.tokens, &rows)?
            };
            let d = state.d;
            let committed = denoise_step(&mut state, &logits, &restrictions, cfg);
            remaining -= committed;
            masked_counts.push(state.masked());
            trace.rows.push(TraceRow {
                step: trace.rows.len() + 1,
                d,
                masked_count: remaining,
                committed_this_step: committed,
                recomputed_tokens: cost.recomputed_tokens,
                cache_hits: cost.cache_hits,
                agreement_with_uncached: None,
            });
            trace.snapshots.push(gen.iter().map(|&p| state.tokens[p]).collect());
        }
        trace.phases.push(PhaseTrace { kinds: phase, n_prime: n, masked_counts });
        tokens = state.tokens;
    }
    if let Some(&p) = gen.iter().find(|&&p| tokens[p] == MASK) {
        return Err(Error::ResidualMask { position: p });
    }
    let parsed = parse_generation(&tokens, &seq.segments)?;
    Ok(DecodeOutput { goal: parsed.goal, actions: parsed.actions, tokens, trace })
}

/// Uncached decode.
pub fn decode<T: Scalar>(
    seq: &AssembledSequence,
    params: &ModelParameters<T>,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let mut src = Uncached::new(params, seq);
    decode_with(seq, cfg, &mut src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, ModelConfig};
    use crate::sequence::assemble;
    use crate::vocab::{Modality, VocabLayout};
    use proptest::prelude::*;

    #[test]
    fn remask_examples() {
        assert_eq!(remask_count(1, 24, 79, 79), 0);
        assert_eq!(remask_count(24, 24, 79, 79), 78);
        assert_eq!(schedule_value(13, 24, 79), 55);
        // Independent check of the floor: 79 * sqrt(2) / 2 = 55.86
        assert_eq!((79.0 * std::f64::consts::SQRT_2 / 2.0f64).floor() as usize, 55);
        assert_eq!(remask_count(3, 3, 10, 1), 0);
    }

    #[test]
    fn confidence_of_three_class_logits() {
        let (tok, c) = predict(&[2.0, 0.0, 0.0, 9.0], &(0..3), 1.0);
        // MASK (id 1) is never predicted, so only ids 0 and 2 compete here.
        let e2 = 2f64.exp();
        assert_eq!(tok, 0);
        assert!((c - e2 / (e2 + 1.0)).abs() < 1e-6);
        let (tok, c) = predict(&[0.0, 0.0, 2.0, 0.0, 0.0], &(2..5), 1.0);
        assert_eq!(tok, 2);
        assert!((c - e2 / (e2 + 2.0)).abs() < 1e-6);
        assert!((c - 0.7869).abs() < 1e-4);
        let (_, hot) = predict(&[0.0, 0.0, 2.0, 0.0, 0.0], &(2..5), 0.5);
        assert!(hot > c);
    }

    fn tiny(layout: &VocabLayout, mode: AttentionMode) -> ModelParameters<f32> {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            mlp_ratio: 2,
            max_seq: 64,
            vocab: layout.size(),
            attention_mode: mode,
            seed: 4,
        };
        ModelParameters::init_with_std(&cfg, 0.5)
    }

    fn query(layout: &VocabLayout, goal: usize, acts: usize, variant: SequenceVariant) -> AssembledSequence {
        let obs: Vec<TokenId> = (0..8).map(|i| layout.image_offset + i % layout.image_size).collect();
        let lang: Vec<TokenId> = (0..6).map(|i| layout.text_offset + 40 + i).collect();
        assemble(layout, &obs, &lang, &vec![MASK; goal], &vec![MASK; acts], variant).unwrap()
    }

    #[test]
    fn init_masks_only_generation_payload() {
        let layout = VocabLayout::new(128, 16, 32);
        let seq = query(&layout, 8, 6, SequenceVariant::Full);
        let mut filled = seq.clone();
        for p in filled.generation_positions() {
            filled.tokens[p] = layout.action_offset;
        }
        let st = init_state(&filled, &DecodeConfig::default());
        assert_eq!(st.tokens, seq.tokens);
        assert_eq!(st.masked(), 14);
        assert_eq!(st.n_prime, 14);
    }

    #[test]
    fn parallel_trace_matches_schedule() {
        let layout = VocabLayout::new(128, 16, 32);
        let p = tiny(&layout, AttentionMode::Hybrid);
        let seq = query(&layout, 8, 6, SequenceVariant::Full);
        for steps in [1, 3, 24] {
            let cfg = DecodeConfig { steps, ..Default::default() };
            let out = decode(&seq, &p, &cfg).unwrap();
            let mut got = vec![out.trace.initial_masked];
            got.extend(out.trace.rows.iter().map(|r| r.masked_count));
            assert_eq!(got, expected_trace(14, steps));
            assert!(out.actions.iter().all(|t| layout.range(Modality::Action).contains(t)));
            assert!(out.goal.unwrap().iter().all(|t| layout.range(Modality::Image).contains(t)));
            for w in out.trace.snapshots.windows(2) {
                for (a, b) in w[0].iter().zip(&w[1]) {
                    assert!(*a == MASK || a == b, "committed token changed");
                }
            }
        }
    }

    #[test]
    fn sequential_commits_goal_first() {
        let layout = VocabLayout::new(128, 16, 32);
        let p = tiny(&layout, AttentionMode::Hybrid);
        let seq = query(&layout, 8, 6, SequenceVariant::Full);
        let cfg = DecodeConfig { steps: 4, variant: DecodeVariant::Sequential, ..Default::default() };
        let out = decode(&seq, &p, &cfg).unwrap();
        assert_eq!(out.trace.rows.len(), 8);
        assert_eq!(out.trace.phases[0].masked_counts, expected_trace(8, 4));
        assert_eq!(out.trace.phases[1].masked_counts, expected_trace(6, 4));
        for snap in &out.trace.snapshots[..4] {
            assert!(snap[8..].iter().all(|&t| t == MASK));
        }
        assert!(out.trace.snapshots[3][..8].iter().all(|&t| t != MASK));
    }

    #[test]
    fn variant_mismatch_is_config_error() {
        let layout = VocabLayout::new(128, 16, 32);
        let p = tiny(&layout, AttentionMode::Hybrid);
        let full = query(&layout, 8, 6, SequenceVariant::Full);
        let cfg = DecodeConfig { variant: DecodeVariant::NoWorldModel, ..Default::default() };
        assert!(matches!(decode(&full, &p, &cfg), Err(Error::Config(_))));
        let short = query(&layout, 0, 6, SequenceVariant::NoWorldModel);
        let out = decode(&short, &p, &cfg).unwrap();
        assert_eq!(out.trace.initial_masked, 6);
        assert!(out.goal.is_none());
    }

    #[test]
    fn deterministic_and_temperature_invariant_final_step() {
        let layout = VocabLayout::new(128, 16, 32);
        let p = tiny(&layout, AttentionMode::Bidirectional);
        let seq = query(&layout, 8, 6, SequenceVariant::Full);
        let one = DecodeConfig { steps: 1, ..Default::default() };
        let a = decode(&seq, &p, &one).unwrap();
        assert_eq!(a, decode(&seq, &p, &one).unwrap());
        let cold = DecodeConfig { temperature: 0.1, ..one };
        assert_eq!(a.tokens, decode(&seq, &p, &cold).unwrap().tokens);
    }

    #[test]
    fn unrestricted_never_predicts_mask() {
        let layout = VocabLayout::new(128, 16, 32);
        let mut p = tiny(&layout, AttentionMode::Hybrid);
        let v = layout.size();
        for row in p.w_head.chunks_mut(v) {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
        p.b_head.iter_mut().for_each(|x| *x = 0.0);
        p.b_head[MASK as usize] = 10.0;
        let seq = query(&layout, 8, 6, SequenceVariant::Full);
        let cfg = DecodeConfig { steps: 3, restrict_logits: false, ..Default::default() };
        let out = decode(&seq, &p, &cfg).unwrap();
        assert!(out.tokens.iter().all(|&t| t != MASK));
    }

    proptest! {
        #[test]
        fn trace_is_strictly_decreasing(n in 1usize..120, steps in 1usize..40) {
            let t = expected_trace(n, steps);
            prop_assert_eq!(t.len(), steps + 1);
            prop_assert_eq!(*t.last().unwrap(), 0);
            prop_assert!(t.windows(2).all(|w| w[1] < w[0] || w[0] == 0));
            prop_assert!(t.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
