//! Regularization path of the L1 logistic regression: how many concepts stay
//! active as C grows, and which ones carry the largest weights.
//!
//! cargo run --release --example sparse_training

use privlex::datasets::Split;
use privlex::pipeline::split_rows;
use privlex::score::{apply_normalizer, cosine_scores, fit_normalizer, NormalizationScope};
use privlex::synth::{generate, PlantedConfig};

fn main() -> privlex::Result<()> {
    let f = generate(&PlantedConfig {
        n_images: 400,
        n_concepts: 40,
        dim: 96,
        ..Default::default()
    })?;
    let raw = cosine_scores(&f.images, &f.concepts)?;
    let (train, labels) = split_rows(&raw, &f.labels, &f.split, Split::Train)?;
    let norm = fit_normalizer(&train, NormalizationScope::PerConcept)?;
    let train = apply_normalizer(&norm, &train)?;

    for c in [1e-4, 1e-3, 1e-2, 0.1, 0.3, 1.0] {
        let model = privlex::lrmodel::train(&train, &labels, &norm, c, 250, 0)?;
        let mut top: Vec<(f64, &str)> = model
            .weights
            .iter()
            .zip(&model.concept_ids)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, id)| (*w, id.as_str()))
            .collect();
        top.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()));
        top.truncate(4);
        let shown: Vec<String> = top.iter().map(|(w, id)| format!("{id} {w:+.2}")).collect();
        println!(
            "C={c:<7} nonzero={:<3} objective={:.4}  {}",
            model.nonzero_count(),
            model.training_meta.objective_value,
            shown.join(", ")
        );
    }
    println!("planted: {:?}", f.planted);
    Ok(())
}
