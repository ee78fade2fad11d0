//! Overfit a single masked-denoising sample, then print the log as CSV.
//! The batch holds `copies` of the same sample, each with its own mask.
//!
//! Usage: train_toy [lr] [d_model] [layers] [copies]

use dvla::model::ModelConfig;
use dvla::model::ModelParameters;
use dvla::sequence::SequenceVariant;
use dvla::simworld::generate_dataset;
use dvla::trainer::{encode_dataset, write_log, CodecConfig, Codecs, TrainConfig, Trainer};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> dvla::Result<()> {
    let (lr, d_model, layers, copies) = (arg(1, 3e-3), arg(2, 64), arg(3, 2), arg(4, 8));
    let data = generate_dataset(2, 0)?;
    let codecs = Codecs::fit(&data, &CodecConfig::default())?;
    let seq = encode_dataset(&data, &codecs, 5, SequenceVariant::Full)?.swap_remove(0).seq;
    let model = ModelConfig { layers, d_model, heads: 4, vocab: codecs.vocab_size(), ..Default::default() };
    let steps = 200;
    let cfg = TrainConfig { batch_size: copies, lr, weight_decay: 0.0, warmup_ratio: 0.05, ..Default::default() };
    let mut t = Trainer::new(ModelParameters::init(&model), cfg, steps)?;
    println!("{} parameters, sequence length {}", t.params.num_params(), seq.len());
    for _ in 0..steps {
        let row = t.train_step(&vec![&seq; copies])?;
        if row.step % 25 == 0 || row.step == 1 {
            println!("step {:>3} loss {:.4} mask {:.3}", row.step, row.loss, row.mask_ratio);
        }
    }
    let mut csv = Vec::new();
    write_log(&t.log[..5], &mut csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}
