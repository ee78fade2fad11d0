//! Compare backprop against double-double central differences on a small model.

use dvla::model::gradcheck::check_gradients;
use dvla::model::{build_attention_mask, AttentionMode, ModelConfig, ModelParameters};
use dvla::sequence::{apply_mask, assemble, SequenceVariant};
use dvla::vocab::VocabLayout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dvla::Result<()> {
    let layout = VocabLayout::new(20, 8, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ids =
        |r: std::ops::Range<u32>, n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(r.clone())).collect() };
    let obs = ids(layout.image_offset..layout.image_offset + 8, 4);
    let lang = ids(layout.text_offset..layout.text_offset + 20, 3);
    let goal = ids(layout.image_offset..layout.image_offset + 8, 4);
    let act = ids(layout.action_offset..layout.action_offset + 12, 3);
    let seq = assemble(&layout, &obs, &lang, &goal, &act, SequenceVariant::Full)?;
    let cfg = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        mlp_ratio: 2,
        max_seq: seq.len(),
        vocab: layout.size(),
        attention_mode: AttentionMode::Hybrid,
        seed: 3,
    };
    let params = ModelParameters::<f64>::init_with_std(&cfg, 0.3);
    let sample = apply_mask(&seq, 0.6, &mut ChaCha8Rng::seed_from_u64(2))?;
    let mask = build_attention_mask(&seq.segments, cfg.attention_mode);
    let report = check_gradients(&params, &[sample], &mask, 1e-5)?;
    println!("checked {} entries", report.entries_checked);
    for (name, err) in &report.per_tensor {
        println!("  {name:<16} worst rel err {err:.2e}");
    }
    let w = &report.worst;
    println!(
        "worst: {}[{}] analytic {:.6e} numeric {:.6e} rel {:.2e}",
        w.tensor, w.index, w.analytic, w.numeric, w.rel_error
    );
    Ok(())
}
