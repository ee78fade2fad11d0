//! Print the block-level visibility of the hybrid, causal and bidirectional masks.

use dvla::model::{build_attention_mask, AttentionMode};
use dvla::sequence::{assemble, SequenceVariant};
use dvla::vocab::{VocabLayout, MASK};

fn main() -> dvla::Result<()> {
    let layout = VocabLayout::new(128, 16, 32);
    let obs = vec![layout.image_offset; 3];
    let lang = vec![layout.text_offset + 65; 2];
    let seq = assemble(&layout, &obs, &lang, &[MASK; 3], &[MASK; 2], SequenceVariant::Full)?;
    let kinds = seq.position_kinds();
    for mode in [AttentionMode::Hybrid, AttentionMode::Causal, AttentionMode::Bidirectional] {
        let m = build_attention_mask(&seq.segments, mode);
        println!("{mode:?} ({} allowed pairs)", m.count());
        for (i, kind) in kinds.iter().enumerate() {
            let row: String = (0..m.n).map(|j| if m.allowed(i, j) { '#' } else { '.' }).collect();
            println!("  {:<6} {row}", kind.name());
        }
    }
    Ok(())
}
