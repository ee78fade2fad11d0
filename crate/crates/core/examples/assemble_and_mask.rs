//! Build the delimited training sequence and apply cosine-schedule masking.

use dvla::sequence::{apply_mask, mask_ratio_at, masked_count, sample_mask_ratio, SequenceVariant};
use dvla::simworld::generate_dataset;
use dvla::trainer::{encode_dataset, CodecConfig, Codecs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dvla::Result<()> {
    let data = generate_dataset(2, 0)?;
    let codecs = Codecs::fit(&data, &CodecConfig::default())?;
    for variant in [SequenceVariant::Full, SequenceVariant::NoWorldModel] {
        let enc = encode_dataset(&data, &codecs, 5, variant)?;
        let seq = &enc[0].seq;
        println!("{variant:?}: {} tokens, n' = {}", seq.len(), seq.n_prime());
        for s in &seq.segments {
            println!("  {:<7} span {:?}", s.kind.name(), s.span);
        }
    }
    let seq = &encode_dataset(&data, &codecs, 5, SequenceVariant::Full)?[0].seq;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for u in [0.0, 0.5, 0.9] {
        let r = mask_ratio_at(u);
        println!("u={u:.1} ratio={r:.3} masks {} of {}", masked_count(r, seq.n_prime()), seq.n_prime());
    }
    let r = sample_mask_ratio(&mut rng);
    let m = apply_mask(seq, r, &mut rng)?;
    println!(
        "sampled ratio {r:.3}: {} positions masked, first few {:?}",
        m.n_masked,
        m.masked_positions().take(6).collect::<Vec<_>>()
    );
    Ok(())
}
