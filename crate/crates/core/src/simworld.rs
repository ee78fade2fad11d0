//! Kinematic 2D tabletop: two colored blocks, two colored zones, and a
//! point effector with a binary gripper.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::RgbImage;

pub const IMAGE_SIZE: usize = 32;
pub const ACTION_DIMS: usize = 3;
pub const MAX_MOVE: f64 = 0.1;
pub const BLOCK_HALF: f64 = 0.06;
pub const ZONE_RADIUS: f64 = 0.1;
pub const ATTACH_DIST: f64 = 0.06;
pub const DEFAULT_MAX_STEPS: usize = 120;

const EXPERT_REACH: f64 = 0.04;
const EXPERT_GAIN: f64 = 0.5;
const EXPERT_NOISE: f64 = 0.005;
const MIN_SPACING: f64 = 0.25;
const RELAXED_SPACING: f64 = 0.2;
const PLACEMENT_RETRIES: usize = 1000;

pub type Action = [f64; ACTION_DIMS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
        }
    }

    fn half_rgb(self) -> [u8; 3] {
        self.rgb().map(|c| c / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub color: Color,
    pub center: [f64; 2],
    pub half_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub color: Color,
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub effector: [f64; 2],
    pub gripper: Gripper,
    pub held: Option<usize>,
    pub blocks: Vec<Block>,
    pub zones: Vec<Zone>,
    pub step_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub seed: u64,
    pub instruction: String,
    pub target_block: usize,
    pub target_zone: usize,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub image: RgbImage,
    pub proprio: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: usize,
    pub spec: EpisodeSpec,
    pub steps: Vec<TrajectoryStep>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn place<R: Rng>(rng: &mut R, count_blocks: usize, count_zones: usize) -> Vec<[f64; 2]> {
    let mut spacing = MIN_SPACING;
    let mut tries = 0;
    loop {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(count_blocks + count_zones);
        for i in 0..count_blocks + count_zones {
            let (lo, hi) = if i < count_blocks { (0.1, 0.9) } else { (0.15, 0.85) };
            pts.push([rng.random_range(lo..hi), rng.random_range(lo..hi)]);
        }
        let ok = (0..pts.len()).all(|i| (i + 1..pts.len()).all(|j| dist(pts[i], pts[j]) >= spacing));
        if ok {
            return pts;
        }
        tries += 1;
        if tries == PLACEMENT_RETRIES {
            spacing = RELAXED_SPACING;
        }
    }
}

/// Seeded initial state and task.
pub fn reset(seed: u64) -> (WorldState, EpisodeSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors = Color::ALL;
    colors.shuffle(&mut rng);
    let pts = place(&mut rng, 2, 2);
    let blocks = (0..2).map(|i| Block { color: colors[i], center: pts[i], half_size: BLOCK_HALF }).collect::<Vec<_>>();
    let zones =
        (0..2).map(|i| Zone { color: colors[2 + i], center: pts[2 + i], radius: ZONE_RADIUS }).collect::<Vec<_>>();
    let effector = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
    let target_block = rng.random_range(0..2);
    let target_zone = rng.random_range(0..2);
    let instruction =
        format!("move the {} block to the {} zone", blocks[target_block].color.name(), zones[target_zone].color.name());
    let state = WorldState { effector, gripper: Gripper::Open, held: None, blocks, zones, step_count: 0 };
    let spec = EpisodeSpec { seed, instruction, target_block, target_zone, max_steps: DEFAULT_MAX_STEPS };
    (state, spec)
}

/// Applies one clamped action.
pub fn step(state: &WorldState, action: &Action) -> WorldState {
    let mut s = state.clone();
    let dx = action[0].clamp(-MAX_MOVE, MAX_MOVE);
    let dy = action[1].clamp(-MAX_MOVE, MAX_MOVE);
    s.effector = [(s.effector[0] + dx).clamp(0.0, 1.0), (s.effector[1] + dy).clamp(0.0, 1.0)];
    if action[2] >= 0.0 {
        s.gripper = Gripper::Closed;
        if s.held.is_none() {
            s.held = s
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| (i, dist(b.center, s.effector)))
                .filter(|&(_, d)| d <= ATTACH_DIST)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
        }
    } else {
        s.gripper = Gripper::Open;
        s.held = None;
    }
    if let Some(h) = s.held {
        s.blocks[h].center = s.effector;
    }
    s.step_count += 1;
    s
}

pub fn is_success(state: &WorldState, spec: &EpisodeSpec) -> bool {
    let block = &state.blocks[spec.target_block];
    let zone = &state.zones[spec.target_zone];
    state.gripper == Gripper::Open && state.held.is_none() && dist(block.center, zone.center) <= zone.radius
}

fn pixel_center(i: usize) -> f64 {
    (i as f64 + 0.5) / IMAGE_SIZE as f64
}

fn pixel_index(x: f64) -> usize {
    ((x * IMAGE_SIZE as f64).floor() as usize).min(IMAGE_SIZE - 1)
}

/// Top-down rasterization; `y` grows with the row index.
pub fn render(state: &WorldState) -> RgbImage {
    let mut img = RgbImage::filled(IMAGE_SIZE, IMAGE_SIZE, [255, 255, 255]);
    for z in &state.zones {
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                if dist([pixel_center(c), pixel_center(r)], z.center) <= z.radius {
                    img.set(r, c, z.color.half_rgb());
                }
            }
        }
    }
    for b in &state.blocks {
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                if (pixel_center(c) - b.center[0]).abs() <= b.half_size
                    && (pixel_center(r) - b.center[1]).abs() <= b.half_size
                {
                    img.set(r, c, b.color.rgb());
                }
            }
        }
    }
    let (er, ec) = (pixel_index(state.effector[1]) as isize, pixel_index(state.effector[0]) as isize);
    for k in -2..=2isize {
        for (r, c) in [(er + k, ec), (er, ec + k)] {
            if (0..IMAGE_SIZE as isize).contains(&r) && (0..IMAGE_SIZE as isize).contains(&c) {
                img.set(r as usize, c as usize, [0, 0, 0]);
            }
        }
    }
    img
}

/// Textual proprioception appended to the instruction.
pub fn proprio_text(state: &WorldState) -> String {
    let g = match state.gripper {
        Gripper::Open => "open",
        Gripper::Closed => "closed",
    };
    // `{:.2}` rounds the exact binary value, so exact ties go to even.
    format!("| x={:.2} y={:.2} g={g}", state.effector[0], state.effector[1])
}

/// Model-facing text for one observation.
pub fn prompt(spec: &EpisodeSpec, state: &WorldState) -> String {
    format!("{} {}", spec.instruction, proprio_text(state))
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    [
        (EXPERT_GAIN * (to[0] - from[0])).clamp(-MAX_MOVE, MAX_MOVE),
        (EXPERT_GAIN * (to[1] - from[1])).clamp(-MAX_MOVE, MAX_MOVE),
    ]
}

/// Scripted controller. `rng = None` disables the motion noise.
pub fn expert_action(state: &WorldState, spec: &EpisodeSpec, rng: Option<&mut dyn RngCore>) -> Action {
    let eff = state.effector;
    let (mv, grip) = match state.held {
        Some(h) if h == spec.target_block => {
            let zone = state.zones[spec.target_zone].center;
            if dist(eff, zone) <= EXPERT_REACH {
                return [0.0, 0.0, -1.0];
            }
            (toward(eff, zone), 1.0)
        }
        Some(_) => return [0.0, 0.0, -1.0],
        None => {
            let block = state.blocks[spec.target_block].center;
            if dist(eff, block) <= EXPERT_REACH {
                return [0.0, 0.0, 1.0];
            }
            (toward(eff, block), -1.0)
        }
    };
    let mut a = [mv[0], mv[1], grip];
    if let Some(rng) = rng {
        for v in &mut a[..2] {
            *v = (*v + rng.random_range(-EXPERT_NOISE..=EXPERT_NOISE)).clamp(-MAX_MOVE, MAX_MOVE);
        }
    }
    a
}

/// Rolls the noisy expert. After success one extra "settle" step with an
/// open-gripper no-op is recorded so the final observation is part of the data.
pub fn expert_episode(seed: u64, episode_id: usize) -> Trajectory {
    let (mut state, spec) = reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut steps = Vec::new();
    let mut success = false;
    while state.step_count < spec.max_steps {
        let action = expert_action(&state, &spec, Some(&mut rng));
        steps.push(TrajectoryStep { image: render(&state), proprio: proprio_text(&state), action });
        state = step(&state, &action);
        if is_success(&state, &spec) {
            success = true;
            steps.push(TrajectoryStep {
                image: render(&state),
                proprio: proprio_text(&state),
                action: [0.0, 0.0, -1.0],
            });
            break;
        }
    }
    Trajectory { episode_id, spec, steps, success }
}

/// `n` successful expert demonstrations from consecutive seeds starting at `seed`.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(n);
    let (mut attempts, mut failures) = (0usize, 0usize);
    let mut s = seed;
    while out.len() < n {
        let t = expert_episode(s, out.len());
        s = s.wrapping_add(1);
        attempts += 1;
        if t.success {
            out.push(t);
        } else {
            failures += 1;
            if attempts >= 20 && failures * 2 > attempts {
                return Err(Error::ExpertFailureRate { failures, attempts });
            }
        }
    }
    Ok(out)
}

/// What a policy sees at decision time. `state` is ground truth and only
/// meant for scripted baselines.
pub struct Observation<'a> {
    pub image: &'a RgbImage,
    pub text: &'a str,
    pub state: &'a WorldState,
    pub spec: &'a EpisodeSpec,
}

pub trait Policy {
    /// Next chunk of actions, executed open-loop.
    fn act(&mut self, obs: &Observation) -> Result<Vec<Action>>;
}

impl<F: FnMut(&Observation) -> Result<Vec<Action>>> Policy for F {
    fn act(&mut self, obs: &Observation) -> Result<Vec<Action>> {
        self(obs)
    }
}

/// Expert as a closed-loop policy (noise seeded per instance).
pub struct ExpertPolicy {
    rng: ChaCha8Rng,
}

impl ExpertPolicy {
    pub fn new(seed: u64) -> Self {
        ExpertPolicy { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for ExpertPolicy {
    fn act(&mut self, obs: &Observation) -> Result<Vec<Action>> {
        Ok(vec![expert_action(obs.state, obs.spec, Some(&mut self.rng))])
    }
}

/// Uniform random actions in the valid box.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    chunk: usize,
}

impl RandomPolicy {
    pub fn new(seed: u64, chunk: usize) -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(seed), chunk: chunk.max(1) }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _: &Observation) -> Result<Vec<Action>> {
        Ok((0..self.chunk)
            .map(|_| {
                [
                    self.rng.random_range(-MAX_MOVE..=MAX_MOVE),
                    self.rng.random_range(-MAX_MOVE..=MAX_MOVE),
                    self.rng.random_range(-1.0..=1.0),
                ]
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub success: bool,
    pub steps: usize,
}

/// Closed loop: observe, predict a chunk, execute all of it, repeat.
pub fn rollout<P: Policy + ?Sized>(policy: &mut P, seed: u64, max_steps: usize) -> Result<RolloutOutcome> {
    let (mut state, spec) = reset(seed);
    while state.step_count < max_steps {
        let image = render(&state);
        let text = prompt(&spec, &state);
        let chunk = policy.act(&Observation { image: &image, text: &text, state: &state, spec: &spec })?;
        if chunk.is_empty() {
            return Err(Error::Data("policy returned an empty action chunk".into()));
        }
        for a in &chunk {
            state = step(&state, a);
            if is_success(&state, &spec) {
                return Ok(RolloutOutcome { success: true, steps: state.step_count });
            }
            if state.step_count >= max_steps {
                break;
            }
        }
    }
    Ok(RolloutOutcome { success: false, steps: state.step_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn empty_state() -> WorldState {
        WorldState {
            effector: [0.5, 0.5],
            gripper: Gripper::Open,
            held: None,
            blocks: vec![],
            zones: vec![],
            step_count: 0,
        }
    }

    #[test]
    fn reset_is_deterministic_and_spaced() {
        assert_eq!(reset(7), reset(7));
        for seed in 0..300 {
            let (s, spec) = reset(seed);
            let mut pts: Vec<[f64; 2]> = s.blocks.iter().map(|b| b.center).collect();
            pts.extend(s.zones.iter().map(|z| z.center));
            for i in 0..4 {
                for j in i + 1..4 {
                    assert!(dist(pts[i], pts[j]) >= RELAXED_SPACING);
                }
            }
            assert!(spec.instruction.is_ascii());
        }
    }

    #[test]
    fn all_colors_become_targets() {
        let mut blocks = std::collections::HashSet::new();
        let mut zones = std::collections::HashSet::new();
        for seed in 0..1000 {
            let (s, spec) = reset(seed);
            blocks.insert(s.blocks[spec.target_block].color);
            zones.insert(s.zones[spec.target_zone].color);
        }
        assert_eq!(blocks.len(), 4);
        assert_eq!(zones.len(), 4);
    }

    #[test]
    fn motion_and_clamp() {
        let s = empty_state();
        let n = step(&s, &[0.1, 0.0, -1.0]);
        assert!((n.effector[0] - 0.6).abs() < 1e-12 && n.effector[1] == 0.5);
        assert_eq!(n.gripper, Gripper::Open);
        let s = WorldState { effector: [0.98, 0.5], ..empty_state() };
        assert_eq!(step(&s, &[0.1, 0.0, -1.0]).effector, [1.0, 0.5]);
        assert_eq!(step(&s, &[5.0, 0.0, -1.0]).effector, [1.0, 0.5]);
    }

    #[test]
    fn attach_and_release() {
        let block = Block { color: Color::Red, center: [0.55, 0.5], half_size: BLOCK_HALF };
        let s = WorldState { blocks: vec![block], ..empty_state() };
        let held = step(&s, &[0.0, 0.0, 1.0]);
        assert_eq!(held.held, Some(0));
        assert_eq!(held.blocks[0].center, held.effector);
        let moved = step(&held, &[0.1, 0.1, 1.0]);
        assert_eq!(moved.blocks[0].center, moved.effector);
        let dropped = step(&moved, &[0.0, 0.0, -1.0]);
        assert_eq!(dropped.held, None);
        assert_eq!(dropped.blocks[0].center, moved.effector);
        let far = WorldState { effector: [0.3, 0.5], ..s };
        assert_eq!(step(&far, &[0.0, 0.0, 1.0]).held, None);
    }

    #[test]
    fn held_block_in_zone_is_not_success() {
        let (mut s, spec) = reset(3);
        s.effector = s.zones[spec.target_zone].center;
        s = step(&s, &[0.0, 0.0, 1.0]);
        s.blocks[spec.target_block].center = s.effector;
        s.held = Some(spec.target_block);
        assert!(!is_success(&s, &spec));
        let released = step(&s, &[0.0, 0.0, -1.0]);
        assert!(is_success(&released, &spec));
    }

    #[test]
    fn render_contract() {
        let img = render(&empty_state());
        let black = (0..32).flat_map(|r| (0..32).map(move |c| (r, c))).filter(|&(r, c)| img.get(r, c) == [0, 0, 0]);
        assert_eq!(black.count(), 9);
        assert_eq!(img.get(16, 14), [0, 0, 0]);
        assert_eq!(img.get(17, 17), [255, 255, 255]);
        let (st, _) = reset(11);
        assert_eq!(render(&st), render(&st));
        let mut s = empty_state();
        s.effector = [0.05, 0.05];
        s.blocks.push(Block { color: Color::Red, center: [0.5, 0.5], half_size: BLOCK_HALF });
        let img = render(&s);
        assert_eq!(img.get(16, 16), [255, 0, 0]);
        assert_eq!(img.get(15, 15), [255, 0, 0]);
        assert_eq!(img.get(1, 1), [0, 0, 0]);
    }

    #[test]
    fn proprio_format() {
        let mut s = empty_state();
        s.effector = [0.42, 0.17];
        assert_eq!(proprio_text(&s), "| x=0.42 y=0.17 g=open");
        s.effector = [0.0, 0.0];
        s.gripper = Gripper::Closed;
        assert_eq!(proprio_text(&s), "| x=0.00 y=0.00 g=closed");
        s.effector = [0.125, 0.375];
        assert_eq!(proprio_text(&s), "| x=0.12 y=0.38 g=closed");
    }

    #[test]
    fn expert_examples() {
        let mut s = empty_state();
        s.effector = [0.2, 0.2];
        s.blocks = vec![
            Block { color: Color::Red, center: [0.5, 0.2], half_size: BLOCK_HALF },
            Block { color: Color::Blue, center: [0.9, 0.9], half_size: BLOCK_HALF },
        ];
        s.zones = vec![
            Zone { color: Color::Green, center: [0.2, 0.8], radius: ZONE_RADIUS },
            Zone { color: Color::Yellow, center: [0.8, 0.2], radius: ZONE_RADIUS },
        ];
        let spec = EpisodeSpec { seed: 0, instruction: String::new(), target_block: 0, target_zone: 0, max_steps: 120 };
        let a = expert_action(&s, &spec, None);
        assert!((a[0] - 0.1).abs() < 1e-12 && a[1] == 0.0 && a[2] == -1.0);
        assert_eq!(a, expert_action(&s, &spec, None));
        s.held = Some(0);
        s.gripper = Gripper::Closed;
        s.effector = [0.22, 0.79];
        assert_eq!(expert_action(&s, &spec, None)[2], -1.0);
    }

    #[test]
    fn expert_episode_lengths() {
        let t = expert_episode(0, 0);
        assert!(t.success && t.len() <= DEFAULT_MAX_STEPS + 1);
        assert_eq!(generate_dataset(3, 5).unwrap(), generate_dataset(3, 5).unwrap());
    }

    proptest! {
        #[test]
        fn containment_and_exclusivity(seed in 0u64..500, actions in prop::collection::vec((-0.3f64..0.3, -0.3f64..0.3, -1.0f64..1.0), 1..60)) {
            let (mut s, _) = reset(seed);
            for (dx, dy, g) in actions {
                s = step(&s, &[dx, dy, g]);
                prop_assert!(s.effector.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(s.blocks.iter().all(|b| b.center.iter().all(|v| (0.0..=1.0).contains(v))));
                if let Some(h) = s.held {
                    prop_assert_eq!(s.gripper, Gripper::Closed);
                    prop_assert_eq!(s.blocks[h].center, s.effector);
                }
            }
        }
    }
}
