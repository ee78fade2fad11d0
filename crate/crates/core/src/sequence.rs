//! Multimodal sequence assembly and training-time masking.
//!
//! Layout of a full sequence:
//!
//! ```text
//! [SOO] obs [EOO] [SOL] lang [EOL] [SOO] goal [EOO] [SOA] actions [EOA]
//! \_________ instruction ________/ \___________ generation ___________/
//! ```
//!
//! The `NoWorldModel` variant drops the goal block. Delimiters are fixed
//! scaffolding: they are never masked and never predicted.

use std::f64::consts::FRAC_PI_2;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Modality, TokenId, VocabLayout, EOA, EOL, EOO, MASK, PAD, SOA, SOL, SOO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Obs,
    Lang,
    Goal,
    Action,
}

impl SegmentKind {
    pub fn role(self) -> Role {
        match self {
            SegmentKind::Obs | SegmentKind::Lang => Role::Instruction,
            SegmentKind::Goal | SegmentKind::Action => Role::Generation,
        }
    }

    /// Vocabulary range that payload tokens of this segment must lie in.
    pub fn modality(self) -> Modality {
        match self {
            SegmentKind::Obs | SegmentKind::Goal => Modality::Image,
            SegmentKind::Lang => Modality::Text,
            SegmentKind::Action => Modality::Action,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::Obs => "obs",
            SegmentKind::Lang => "lang",
            SegmentKind::Goal => "goal",
            SegmentKind::Action => "action",
        }
    }

    fn delimiters(self) -> (TokenId, TokenId) {
        match self {
            SegmentKind::Obs | SegmentKind::Goal => (SOO, EOO),
            SegmentKind::Lang => (SOL, EOL),
            SegmentKind::Action => (SOA, EOA),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Instruction,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceVariant {
    #[default]
    Full,
    NoWorldModel,
}

/// One modality block. `span` covers the delimiters, `payload` only the content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub span: Range<usize>,
    pub payload: Range<usize>,
}

impl Segment {
    pub fn role(&self) -> Role {
        self.kind.role()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    pub layout: VocabLayout,
    pub variant: SequenceVariant,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    /// Payload positions of the generation segments, in sequence order.
    pub fn generation_positions(&self) -> Vec<usize> {
        self.segments.iter().filter(|s| s.role() == Role::Generation).flat_map(|s| s.payload.clone()).collect()
    }

    pub fn payload_positions(&self, kind: SegmentKind) -> Vec<usize> {
        self.segment(kind).map(|s| s.payload.clone().collect()).unwrap_or_default()
    }

    /// Number of maskable tokens (n').
    pub fn n_prime(&self) -> usize {
        self.segments.iter().filter(|s| s.role() == Role::Generation).map(|s| s.payload.len()).sum()
    }

    /// Instruction span (everything before the first generation segment).
    pub fn instruction_len(&self) -> usize {
        self.segments.iter().find(|s| s.role() == Role::Generation).map(|s| s.span.start).unwrap_or(self.tokens.len())
    }

    /// Segment kind owning each position, delimiters included.
    pub fn position_kinds(&self) -> Vec<SegmentKind> {
        let mut out = Vec::with_capacity(self.tokens.len());
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.kind, s.span.len()));
        }
        out
    }
}

/// Sequence length for the given payload sizes.
pub fn sequence_len(obs: usize, lang: usize, goal: usize, actions: usize, variant: SequenceVariant) -> usize {
    match variant {
        SequenceVariant::Full => obs + lang + goal + actions + 8,
        SequenceVariant::NoWorldModel => obs + lang + actions + 6,
    }
}

/// Builds the delimited sequence. Generation payloads may contain MASK; the
/// language payload may contain PAD.
pub fn assemble(
    layout: &VocabLayout,
    obs: &[TokenId],
    lang: &[TokenId],
    goal: &[TokenId],
    actions: &[TokenId],
    variant: SequenceVariant,
) -> Result<AssembledSequence> {
    let mut parts: Vec<(SegmentKind, &[TokenId])> = vec![(SegmentKind::Obs, obs), (SegmentKind::Lang, lang)];
    if variant == SequenceVariant::Full {
        if goal.is_empty() {
            return Err(Error::RangeViolation { position: 0, token: MASK, segment: "goal" });
        }
        parts.push((SegmentKind::Goal, goal));
    }
    parts.push((SegmentKind::Action, actions));

    let mut tokens = Vec::new();
    let mut segments = Vec::with_capacity(parts.len());
    for (kind, payload) in parts {
        let range = layout.range(kind.modality());
        let (open, close) = kind.delimiters();
        let start = tokens.len();
        tokens.push(open);
        for &t in payload {
            let ok = range.contains(&t)
                || (kind.role() == Role::Generation && t == MASK)
                || (kind == SegmentKind::Lang && t == PAD);
            if !ok {
                return Err(Error::RangeViolation { position: tokens.len(), token: t, segment: kind.name() });
            }
            tokens.push(t);
        }
        tokens.push(close);
        segments.push(Segment { kind, span: start..tokens.len(), payload: start + 1..tokens.len() - 1 });
    }
    Ok(AssembledSequence { tokens, segments, layout: *layout, variant })
}

/// Cosine-schedule mask ratio `cos(pi/2 * u)` with `u ~ U[0, 1)`.
pub fn sample_mask_ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    mask_ratio_at(u)
}

pub fn mask_ratio_at(u: f64) -> f64 {
    (FRAC_PI_2 * u).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub input_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
    pub mask_flags: Vec<bool>,
    pub n_masked: usize,
}

impl MaskedSample {
    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask_flags.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

/// Number of tokens to mask: `max(1, round_half_up(ratio * n'))`.
pub fn masked_count(ratio: f64, n_prime: usize) -> usize {
    ((ratio * n_prime as f64 + 0.5).floor() as usize).clamp(1, n_prime)
}

/// Masks a uniformly chosen subset of generation payload positions.
pub fn apply_mask<R: Rng + ?Sized>(seq: &AssembledSequence, ratio: f64, rng: &mut R) -> Result<MaskedSample> {
    let positions = seq.generation_positions();
    if positions.is_empty() {
        return Err(Error::NoMaskablePositions);
    }
    let n = masked_count(ratio, positions.len());
    let mut mask_flags = vec![false; seq.len()];
    let mut input_tokens = seq.tokens.clone();
    for i in rand::seq::index::sample(rng, positions.len(), n).iter() {
        let p = positions[i];
        mask_flags[p] = true;
        input_tokens[p] = MASK;
    }
    Ok(MaskedSample { input_tokens, target_tokens: seq.tokens.clone(), mask_flags, n_masked: n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    pub goal: Option<Vec<TokenId>>,
    pub actions: Vec<TokenId>,
}

/// Slices the generation payloads out of a fully decoded token list.
pub fn parse_generation(tokens: &[TokenId], segments: &[Segment]) -> Result<GenerationOutput> {
    let mut goal = None;
    let mut actions = Vec::new();
    for s in segments.iter().filter(|s| s.role() == Role::Generation) {
        let payload = &tokens[s.payload.clone()];
        if let Some(off) = payload.iter().position(|&t| t == MASK) {
            return Err(Error::ResidualMask { position: s.payload.start + off });
        }
        match s.kind {
            SegmentKind::Goal => goal = Some(payload.to_vec()),
            SegmentKind::Action => actions = payload.to_vec(),
            _ => unreachable!(),
        }
    }
    Ok(GenerationOutput { goal, actions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout() -> VocabLayout {
        VocabLayout::new(128, 64, 256)
    }

    fn payloads(l: &VocabLayout, obs: usize, lang: usize, goal: usize, act: usize) -> [Vec<TokenId>; 4] {
        [
            (0..obs).map(|i| l.image_offset + (i as u32 % 64)).collect(),
            (0..lang).map(|i| if i < lang / 2 { l.text_offset + 97 } else { PAD }).collect(),
            (0..goal).map(|i| l.image_offset + ((i as u32 * 7) % 64)).collect(),
            (0..act).map(|i| l.action_offset + (i as u32 * 13) % 256).collect(),
        ]
    }

    fn sample_seq(variant: SequenceVariant) -> AssembledSequence {
        let l = layout();
        let [o, t, g, a] = payloads(&l, 64, 32, 64, 15);
        assemble(&l, &o, &t, &g, &a, variant).unwrap()
    }

    #[test]
    fn full_layout_lengths() {
        let s = sample_seq(SequenceVariant::Full);
        assert_eq!(s.len(), 183);
        assert_eq!(s.n_prime(), 79);
        assert_eq!(s.len(), sequence_len(64, 32, 64, 15, SequenceVariant::Full));
        let delims: Vec<(usize, TokenId)> =
            vec![(0, SOO), (65, EOO), (66, SOL), (99, EOL), (100, SOO), (165, EOO), (166, SOA), (182, EOA)];
        for (p, t) in delims {
            assert_eq!(s.tokens[p], t, "position {p}");
        }
        assert_eq!(s.instruction_len(), 100);
    }

    #[test]
    fn no_world_model_layout() {
        let s = sample_seq(SequenceVariant::NoWorldModel);
        assert_eq!(s.len(), 117);
        assert_eq!(s.n_prime(), 15);
        assert!(s.segment(SegmentKind::Goal).is_none());
        assert_eq!(s.tokens.iter().filter(|&&t| t == SOO).count(), 1);
    }

    #[test]
    fn rejects_missing_goal_and_bad_ranges() {
        let l = layout();
        let [o, t, _, a] = payloads(&l, 64, 32, 64, 15);
        assert!(matches!(
            assemble(&l, &o, &t, &[], &a, SequenceVariant::Full),
            Err(Error::RangeViolation { segment: "goal", .. })
        ));
        let mut bad = a.clone();
        bad[3] = l.image_offset;
        assert!(matches!(
            assemble(&l, &o, &t, &o, &bad, SequenceVariant::Full),
            Err(Error::RangeViolation { segment: "action", .. })
        ));
        let mut bad_obs = o.clone();
        bad_obs[0] = MASK;
        assert!(assemble(&l, &bad_obs, &t, &o, &a, SequenceVariant::Full).is_err());
    }

    #[test]
    fn ratio_endpoints() {
        assert_eq!(mask_ratio_at(0.0), 1.0);
        assert!(mask_ratio_at(1.0 - 1e-12) < 1e-9);
    }

    #[test]
    fn ratio_mean_matches_quadrature() {
        // Composite Simpson on cos(pi u / 2) over [0, 1].
        let n = 1000;
        let h = 1.0 / n as f64;
        let mut acc = mask_ratio_at(0.0) + mask_ratio_at(1.0);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * mask_ratio_at(i as f64 * h);
        }
        let oracle = acc * h / 3.0;
        assert!((oracle - 2.0 / std::f64::consts::PI).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean: f64 = (0..100_000).map(|_| sample_mask_ratio(&mut rng)).sum::<f64>() / 100_000.0;
        assert!((mean - oracle).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn mask_counts() {
        let s = sample_seq(SequenceVariant::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = apply_mask(&s, 1.0, &mut rng).unwrap();
        assert_eq!(full.n_masked, 79);
        assert!(s.generation_positions().iter().all(|&p| full.input_tokens[p] == MASK));
        assert_eq!(apply_mask(&s, 1e-9, &mut rng).unwrap().n_masked, 1);
        for _ in 0..1000 {
            let m = apply_mask(&s, 0.5, &mut rng).unwrap();
            assert_eq!(m.n_masked, 40);
            for seg in &s.segments {
                assert!(!m.mask_flags[seg.span.start] && !m.mask_flags[seg.span.end - 1]);
            }
        }
    }

    #[test]
    fn parse_round_trip_and_residual_mask() {
        let l = layout();
        let [o, t, g, a] = payloads(&l, 64, 32, 64, 15);
        let s = assemble(&l, &o, &t, &g, &a, SequenceVariant::Full).unwrap();
        let out = parse_generation(&s.tokens, &s.segments).unwrap();
        assert_eq!(out.goal.as_deref(), Some(&g[..]));
        assert_eq!(out.actions, a);

        let nw = assemble(&l, &o, &t, &[], &a, SequenceVariant::NoWorldModel).unwrap();
        let out = parse_generation(&nw.tokens, &nw.segments).unwrap();
        assert_eq!(out.goal, None);
        assert_eq!(out.actions.len(), 15);

        let mut toks = s.tokens.clone();
        toks[170] = MASK;
        assert!(matches!(parse_generation(&toks, &s.segments), Err(Error::ResidualMask { position: 170 })));
    }

    proptest! {
        #[test]
        fn masking_only_touches_generation_payload(ratio in 1e-6f64..=1.0, seed in any::<u64>(), nwm in any::<bool>()) {
            let variant = if nwm { SequenceVariant::NoWorldModel } else { SequenceVariant::Full };
            let s = sample_seq(variant);
            let gen = s.generation_positions();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = apply_mask(&s, ratio, &mut rng).unwrap();
            prop_assert!(m.n_masked >= 1 && m.n_masked <= s.n_prime());
            prop_assert_eq!(m.mask_flags.iter().filter(|&&f| f).count(), m.n_masked);
            for i in 0..s.len() {
                if m.mask_flags[i] {
                    prop_assert!(gen.contains(&i));
                    prop_assert_eq!(m.input_tokens[i], MASK);
                } else {
                    prop_assert_eq!(m.input_tokens[i], m.target_tokens[i]);
                }
            }
        }

        #[test]
        fn assemble_parse_identity(goal_len in 1usize..20, act_len in 1usize..20, seed in any::<u64>()) {
            let l = layout();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<TokenId> = (0..goal_len).map(|_| rng.random_range(l.range(Modality::Image))).collect();
            let a: Vec<TokenId> = (0..act_len).map(|_| rng.random_range(l.range(Modality::Action))).collect();
            let o = vec![l.image_offset; 4];
            let t = vec![l.text_offset; 3];
            let s = assemble(&l, &o, &t, &g, &a, SequenceVariant::Full).unwrap();
            prop_assert_eq!(s.len(), sequence_len(4, 3, goal_len, act_len, SequenceVariant::Full));
            let out = parse_generation(&s.tokens, &s.segments).unwrap();
            prop_assert_eq!(out.goal, Some(g));
            prop_assert_eq!(out.actions, a);
        }
    }
}
