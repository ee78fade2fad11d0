//! Generate expert data, train a small model, and evaluate it closed loop.
//!
//! Usage: end_to_end [episodes] [train_steps] [eval_episodes]

use dvla::cli::{train_run, RunConfig};
use dvla::experiment::evaluate;
use dvla::policy::{run_episodes, RolloutSummary};
use dvla::simworld::{generate_dataset, RandomPolicy};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> dvla::Result<()> {
    let (episodes, steps, evals) = (arg(1, 40), arg(2, 300), arg(3, 10));
    let data = generate_dataset(episodes, 0)?;
    let mut cfg = RunConfig::default();
    cfg.model.layers = 2;
    cfg.model.d_model = 64;
    cfg.train.lr = 1e-3;
    cfg.train.max_steps = Some(steps);
    cfg.codec.kmeans_frames = 500;
    let (ck, log) = train_run(&data, cfg, 50)?;
    println!("trained {} steps, loss {:.3} -> {:.3}", log.len(), log[0].loss, log[log.len() - 1].loss);

    let seeds: Vec<u64> = (10_000..10_000 + evals as u64).collect();
    let model = evaluate(&ck, &ck.config, &seeds)?;
    let random =
        RolloutSummary::new(run_episodes(&mut RandomPolicy::new(0, 5), &seeds, ck.config.sim.max_steps)?, &[], &[]);
    println!("model success {:.3} ({:.1} ms per decode)", model.success_rate, model.decode_ms_mean.unwrap_or(0.0));
    println!("random success {:.3}", random.success_rate);
    Ok(())
}
