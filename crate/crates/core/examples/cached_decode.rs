//! Compare cached and uncached decoding across refresh intervals and update ratios.

use std::time::Instant;

use dvla::cache::{decode_with_cache, CachePolicy};
use dvla::decoder::{decode, token_agreement, DecodeConfig};
use dvla::model::{ModelConfig, ModelParameters};
use dvla::simworld::{generate_dataset, prompt, render, reset};
use dvla::trainer::{CodecConfig, Codecs};

fn main() -> dvla::Result<()> {
    let codecs = Codecs::fit(&generate_dataset(2, 0)?, &CodecConfig::default())?;
    let model = ModelConfig { vocab: codecs.vocab_size(), ..Default::default() };
    let params = ModelParameters::<f32>::init_with_std(&model, 0.3);
    let cfg = DecodeConfig::default();
    let (state, spec) = reset(11);
    let seq = codecs.encode_query(&render(&state), &prompt(&spec, &state), 5, cfg.variant.sequence_variant())?;
    let gen = seq.generation_positions();
    let pick = |t: &[u32]| gen.iter().map(|&p| t[p]).collect::<Vec<_>>();

    let start = Instant::now();
    let plain = decode(&seq, &params, &cfg)?;
    println!("uncached: {:.1} ms", start.elapsed().as_secs_f64() * 1e3);
    println!("lambda  rho   agreement  recomputed  hits   ms");
    for (lambda, rho) in [(1, 0.25), (3, 0.25), (6, 0.25), (6, 0.5), (12, 0.1), (6, 1.0)] {
        let policy = CachePolicy { refresh_interval: lambda, update_ratio: rho };
        let start = Instant::now();
        let (out, stats) = decode_with_cache(&seq, &params, &cfg, &policy)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let agree = token_agreement(&pick(&out.tokens), &pick(&plain.tokens));
        println!(
            "{lambda:>6}  {rho:<4}  {agree:>9.3}  {:>10}  {:>5}  {ms:.1}",
            stats.recomputed_tokens, stats.cache_hits
        );
    }
    Ok(())
}
