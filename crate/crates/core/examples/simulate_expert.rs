//! Roll the scripted expert and the random baseline, and dump one rendered frame.

use dvla::policy::{run_episodes, RolloutSummary};
use dvla::simworld::{expert_episode, render, reset, ExpertPolicy, RandomPolicy};

fn main() -> dvla::Result<()> {
    let seeds: Vec<u64> = (0..200).collect();
    let expert = RolloutSummary::new(run_episodes(&mut ExpertPolicy::new(0), &seeds, 120)?, &[], &[]);
    let random = RolloutSummary::new(run_episodes(&mut RandomPolicy::new(0, 5), &seeds, 120)?, &[], &[]);
    println!("expert success {:.3} (mean steps {:.1})", expert.success_rate, expert.mean_steps);
    println!("random success {:.3}", random.success_rate);

    let t = expert_episode(42, 0);
    println!("seed 42: \"{}\", {} recorded steps, success {}", t.spec.instruction, t.len(), t.success);
    for s in t.steps.iter().take(4) {
        println!("  {} -> {:.3?}", s.proprio, s.action);
    }
    let img = render(&reset(42).0);
    for r in (0..32).step_by(2) {
        let line: String = (0..32)
            .map(|c| match img.get(r, c) {
                [255, 255, 255] => '.',
                [0, 0, 0] => '+',
                [a, b, c] if a.max(b).max(c) == 255 => '#',
                _ => 'o',
            })
            .collect();
        println!("  {line}");
    }
    Ok(())
}
