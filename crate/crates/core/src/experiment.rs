//! Train-and-evaluate harness shared by the end-to-end and ablation runs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cli::{train_run, Checkpoint, RunConfig};
use crate::decoder::DecodeVariant;
use crate::error::Result;
use crate::model::AttentionMode;
use crate::policy::{run_episodes, ModelPolicy, RolloutSummary};
use crate::sequence::SequenceVariant;
use crate::simworld::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoWorldModel,
    Sequential,
    Causal,
    Bidirectional,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Full, Arm::NoWorldModel, Arm::Sequential, Arm::Causal, Arm::Bidirectional];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoWorldModel => "no_world_model",
            Arm::Sequential => "sequential",
            Arm::Causal => "causal",
            Arm::Bidirectional => "bidirectional",
        }
    }

    /// Arms that decode from the same trained network.
    fn trained_as(self) -> Arm {
        match self {
            Arm::Sequential => Arm::Full,
            a => a,
        }
    }

    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.train.variant = SequenceVariant::Full;
        cfg.model.attention_mode = AttentionMode::Hybrid;
        cfg.decode.variant = DecodeVariant::Parallel;
        match self {
            Arm::Full => {}
            Arm::NoWorldModel => {
                cfg.train.variant = SequenceVariant::NoWorldModel;
                cfg.decode.variant = DecodeVariant::NoWorldModel;
            }
            Arm::Sequential => cfg.decode.variant = DecodeVariant::Sequential,
            Arm::Causal => cfg.model.attention_mode = AttentionMode::Causal,
            Arm::Bidirectional => cfg.model.attention_mode = AttentionMode::Bidirectional,
        }
        cfg
    }
}

/// Closed-loop success of a checkpoint decoded with `cfg`'s decode settings.
pub fn evaluate(ck: &Checkpoint, cfg: &RunConfig, seeds: &[u64]) -> Result<RolloutSummary> {
    let mut p = ModelPolicy::new(&ck.params, &ck.codecs, cfg.decode.clone(), cfg.train.chunk_size);
    let eps = run_episodes(&mut p, seeds, cfg.sim.max_steps)?;
    Ok(RolloutSummary::new(eps, &p.decode_ms, &p.agreements))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub final_loss: f64,
    pub train_seconds: f64,
}

/// Trains each distinct network once per seed and evaluates every arm.
pub fn run_ablation(
    data: &[Trajectory],
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    eval_seeds: &[u64],
    progress: usize,
) -> Result<Vec<ArmResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut trained: Vec<(Arm, Checkpoint, f64, f64)> = Vec::new();
        for &arm in arms {
            let key = arm.trained_as();
            if !trained.iter().any(|(a, ..)| *a == key) {
                let mut cfg = key.configure(base);
                cfg.train.seed = seed;
                cfg.model.seed = seed;
                let start = Instant::now();
                let (ck, log) = train_run(data, cfg, progress)?;
                let tail = &log[log.len().saturating_sub(50)..];
                let loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
                trained.push((key, ck, loss, start.elapsed().as_secs_f64()));
            }
            let (_, ck, loss, secs) = trained.iter().find(|(a, ..)| *a == key).expect("trained above");
            let mut cfg = arm.configure(&ck.config);
            cfg.decode.steps = base.decode.steps;
            let summary = evaluate(ck, &cfg, eval_seeds)?;
            out.push(ArmResult {
                arm,
                seed,
                success_rate: summary.success_rate,
                mean_steps: summary.mean_steps,
                final_loss: *loss,
                train_seconds: *secs,
            });
        }
    }
    Ok(out)
}

/// Markdown table: one row per arm, one column per seed, then the mean.
pub fn ablation_table(results: &[ArmResult]) -> String {
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut arms: Vec<Arm> = Vec::new();
    for r in results {
        if !arms.contains(&r.arm) {
            arms.push(r.arm);
        }
    }
    let mut s = String::from("| arm |");
    for seed in &seeds {
        s += &format!(" seed {seed} |");
    }
    s += " mean |\n|---|";
    s += &"---|".repeat(seeds.len() + 1);
    s.push('\n');
    for arm in arms {
        let rates: Vec<f64> = seeds
            .iter()
            .filter_map(|&sd| results.iter().find(|r| r.arm == arm && r.seed == sd))
            .map(|r| r.success_rate)
            .collect();
        s += &format!("| {} |", arm.name());
        for r in &rates {
            s += &format!(" {r:.3} |");
        }
        s += &format!(" {:.3} |\n", rates.iter().sum::<f64>() / rates.len().max(1) as f64);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_configure_consistently() {
        let base = RunConfig::default();
        for arm in Arm::ALL {
            arm.configure(&base).validate().unwrap();
        }
        assert_eq!(Arm::Sequential.trained_as(), Arm::Full);
        assert_eq!(Arm::Causal.configure(&base).model.attention_mode, AttentionMode::Causal);
    }

    #[test]
    fn table_layout() {
        let r = |arm, seed, success_rate| ArmResult {
            arm,
            seed,
            success_rate,
            mean_steps: 0.0,
            final_loss: 0.0,
            train_seconds: 0.0,
        };
        let t = ablation_table(&[
            r(Arm::Full, 0, 0.5),
            r(Arm::Full, 1, 1.0),
            r(Arm::Causal, 0, 0.0),
            r(Arm::Causal, 1, 0.25),
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "| arm | seed 0 | seed 1 | mean |");
        assert_eq!(lines[2], "| full | 0.500 | 1.000 | 0.750 |");
        assert_eq!(lines[3], "| causal | 0.000 | 0.250 | 0.125 |");
    }
}
