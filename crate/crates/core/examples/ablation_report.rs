//! Train the ablation arms over several seeds and print a success-rate table.
//!
//! Usage: ablation_report [episodes] [train_steps] [seeds] [eval_episodes]

use dvla::cli::RunConfig;
use dvla::experiment::{ablation_table, run_ablation, Arm};
use dvla::simworld::generate_dataset;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> dvla::Result<()> {
    let (episodes, steps, seeds, evals) = (arg(1, 20), arg(2, 100), arg(3, 3), arg(4, 5));
    let data = generate_dataset(episodes, 0)?;
    let mut base = RunConfig::default();
    base.model.layers = 1;
    base.model.d_model = 32;
    base.model.heads = 2;
    base.train.lr = 1e-3;
    base.train.max_steps = Some(steps);
    base.codec.kmeans_frames = 300;
    base.decode.steps = 12;
    let seeds: Vec<u64> = (0..seeds as u64).collect();
    let evals: Vec<u64> = (20_000..20_000 + evals as u64).collect();
    let results = run_ablation(&data, &base, &Arm::ALL, &seeds, &evals, 0)?;
    for r in &results {
        eprintln!(
            "{:<15} seed {} success {:.3} loss {:.3} {:.0}s",
            r.arm.name(),
            r.seed,
            r.success_rate,
            r.final_loss,
            r.train_seconds
        );
    }
    print!("{}", ablation_table(&results));
    Ok(())
}
