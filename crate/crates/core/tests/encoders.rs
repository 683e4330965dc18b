use std::path::{Path, PathBuf};

use privlex::embed::{embed_images, embed_texts, load_matrix, ClipTokenizer, EncoderHandle, ImageItem};
use privlex::vocab::read_prompts;
use privlex::Error;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/encoders")
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn image_embeddings_match_reference() {
    let dir = fixtures();
    let handle = EncoderHandle::load(&dir.join("image_encoder.onnx")).unwrap();
    let items = ImageItem::read_list(&dir.join("images.txt")).unwrap();
    let out = embed_images(&handle, &items, 2).unwrap();
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].id, "broken");
    let reference = load_matrix(&dir.join("images_ref.pvx")).unwrap();
    assert_eq!(out.matrix.ids(), reference.ids());
    for i in 0..reference.len() {
        let c = cosine(out.matrix.row(i), reference.row(i));
        assert!(c > 0.999, "{}: cosine {c}", reference.ids()[i]);
    }
}

#[test]
fn batch_size_does_not_change_bits() {
    let dir = fixtures();
    let handle = EncoderHandle::load(&dir.join("image_encoder.onnx")).unwrap();
    let items = ImageItem::read_list(&dir.join("images.txt")).unwrap();
    let a = embed_images(&handle, &items, 1).unwrap().matrix;
    let b = embed_images(&handle, &items, 5).unwrap().matrix;
    assert_eq!(a, b);
}

#[test]
fn tokenizer_matches_reference_ids() {
    let dir = fixtures();
    let tok = ClipTokenizer::from_files(&dir.join("vocab.json"), &dir.join("merges.txt")).unwrap();
    let refs: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("token_ids.json")).unwrap()).unwrap();
    let pad = tok.end_id();
    for r in refs {
        let (ids, mask) = tok.encode_padded(r["text"].as_str().unwrap(), 16, pad).unwrap();
        let want: Vec<i64> = r["input_ids"].as_array().unwrap().iter().map(|v| v.as_i64().unwrap()).collect();
        let want_mask: Vec<i64> = r["attention_mask"].as_array().unwrap().iter().map(|v| v.as_i64().unwrap()).collect();
        assert_eq!(ids, want, "{}", r["text"]);
        assert_eq!(mask, want_mask);
    }
}

#[test]
fn text_embeddings_match_reference() {
    let dir = fixtures();
    let handle = EncoderHandle::load(&dir.join("text_encoder.onnx")).unwrap();
    let prompts = read_prompts(&dir.join("prompts.jsonl")).unwrap();
    let m = embed_texts(&handle, &prompts, 3).unwrap();
    let reference = load_matrix(&dir.join("texts_ref.pvx")).unwrap();
    assert_eq!(m.ids(), reference.ids());
    for i in 0..reference.len() {
        assert!(cosine(m.row(i), reference.row(i)) > 0.999);
    }
}

#[test]
fn wrong_modality_and_dimension() {
    let dir = fixtures();
    let text = EncoderHandle::load(&dir.join("text_encoder.onnx")).unwrap();
    let items = ImageItem::read_list(&dir.join("images.txt")).unwrap();
    assert!(matches!(embed_images(&text, &items, 1), Err(Error::Encoder(_))));

    let tmp = tempfile::tempdir().unwrap();
    std::fs::copy(dir.join("image_encoder.onnx"), tmp.path().join("m.onnx")).unwrap();
    let manifest = std::fs::read_to_string(dir.join("image_encoder.onnx.manifest.json")).unwrap();
    std::fs::write(
        tmp.path().join("m.onnx.manifest.json"),
        manifest.replace("\"reported_dim\": 8", "\"reported_dim\": 9"),
    )
    .unwrap();
    let handle = EncoderHandle::load(&tmp.path().join("m.onnx")).unwrap();
    let err = embed_images(&handle, &items, 1).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { expected: 9, actual: 8 }), "{err:?}");
}

#[test]
fn cli_embeds_both_modalities() {
    let dir = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_privlex")).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let images = tmp.path().join("images.pvx");
    let texts = tmp.path().join("texts.pvx");
    run(&[
        "embed", "images", "--model", dir.join("image_encoder.onnx").to_str().unwrap(),
        "--in", dir.join("images.txt").to_str().unwrap(), "--out", images.to_str().unwrap(),
    ]);
    run(&[
        "embed", "texts", "--model", dir.join("text_encoder.onnx").to_str().unwrap(),
        "--in", dir.join("prompts.jsonl").to_str().unwrap(), "--out", texts.to_str().unwrap(),
    ]);
    assert_eq!(load_matrix(&images).unwrap().len(), 4);
    assert_eq!(load_matrix(&texts).unwrap().len(), 5);
}
