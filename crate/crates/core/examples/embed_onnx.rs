//! Embeds images and prompt sentences with the tiny ONNX encoders used by the
//! test suite, then scores every image against every prompt.
//!
//! cargo run --example embed_onnx

use std::path::Path;

use privlex::embed::{embed_images, embed_texts, EncoderHandle, ImageItem};
use privlex::score::cosine_scores;
use privlex::vocab::read_prompts;

fn main() -> privlex::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/encoders");
    let image_encoder = EncoderHandle::load(&dir.join("image_encoder.onnx"))?;
    let text_encoder = EncoderHandle::load(&dir.join("text_encoder.onnx"))?;

    let out = embed_images(&image_encoder, &ImageItem::read_list(&dir.join("images.txt"))?, 4)?;
    for s in &out.skipped {
        println!("skipped {} ({})", s.id, s.reason);
    }
    let prompts = read_prompts(&dir.join("prompts.jsonl"))?;
    let texts = embed_texts(&text_encoder, &prompts, 4)?;
    println!("{} images × {} prompts, dim {}", out.matrix.len(), texts.len(), texts.dim());

    let scores = cosine_scores(&out.matrix, &texts)?;
    for (i, id) in scores.image_ids().iter().enumerate() {
        let row: Vec<String> = scores.row(i).iter().map(|v| format!("{v:+.3}")).collect();
        println!("{id}: {}", row.join(" "));
    }
    Ok(())
}
