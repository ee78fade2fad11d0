//! Denoise one observation and print the per-step trace.
//!
//! Pass a checkpoint path to decode with trained weights; otherwise a small
//! randomly initialized model is used.

use dvla::cli::Checkpoint;
use dvla::decoder::{decode, expected_trace, DecodeConfig};
use dvla::model::{ModelConfig, ModelParameters};
use dvla::simworld::{generate_dataset, prompt, render, reset};
use dvla::trainer::{CodecConfig, Codecs};

fn main() -> dvla::Result<()> {
    let (params, codecs, cfg) = match std::env::args().nth(1) {
        Some(path) => {
            let ck = Checkpoint::load(path.as_ref())?;
            (ck.params, ck.codecs, ck.config.decode)
        }
        None => {
            let codecs = Codecs::fit(&generate_dataset(2, 0)?, &CodecConfig::default())?;
            let model =
                ModelConfig { layers: 2, d_model: 32, heads: 2, vocab: codecs.vocab_size(), ..Default::default() };
            (ModelParameters::init_with_std(&model, 0.3), codecs, DecodeConfig::default())
        }
    };
    let (state, spec) = reset(3);
    let seq = codecs.encode_query(&render(&state), &prompt(&spec, &state), 5, cfg.variant.sequence_variant())?;
    let out = decode(&seq, &params, &cfg)?;
    println!("\"{}\"", spec.instruction);
    println!("n' = {}, schedule {:?}", seq.n_prime(), expected_trace(seq.n_prime(), cfg.steps));
    out.trace.write_csv(std::io::stdout().lock())?;
    println!("actions {:.3?}", codecs.decode_actions(&out.actions)?);
    Ok(())
}
