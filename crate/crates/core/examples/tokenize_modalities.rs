//! Encode one observation's text, image and action chunk, then decode them back.

use dvla::simworld::expert_episode;
use dvla::trainer::{CodecConfig, Codecs};

fn main() -> dvla::Result<()> {
    let data: Vec<_> = (0..8).map(|s| expert_episode(s, s as usize)).collect();
    let codecs = Codecs::fit(&data, &CodecConfig::default())?;
    let step = &data[0].steps[0];
    let text = format!("{} {}", data[0].spec.instruction, step.proprio);

    let text_ids = codecs.text.encode(&text)?;
    println!("text   {:>3} ids, round trip: {:?}", text_ids.len(), codecs.text.decode(&text_ids)?);

    let img_ids = codecs.image.encode(&step.image)?;
    let recon = codecs.image.decode(&img_ids)?;
    let err: f64 = step.image.pixels.iter().zip(&recon.pixels).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>()
        / step.image.pixels.len() as f64;
    println!("image  {:>3} ids, mean abs pixel error after reconstruction {err:.2}", img_ids.len());

    let chunk: Vec<_> = data[0].steps[..5].iter().map(|s| s.action).collect();
    let act_ids = codecs.binner.encode_chunk(&chunk)?;
    for (a, b) in chunk.iter().zip(codecs.decode_actions(&act_ids)?) {
        println!("action {a:?} -> {b:.4?}");
    }
    let vocab = codecs.layout;
    println!(
        "vocab: {} ids (text @{}, image @{}, action @{})",
        vocab.size(),
        vocab.text_offset,
        vocab.image_offset,
        vocab.action_offset
    );
    Ok(())
}
