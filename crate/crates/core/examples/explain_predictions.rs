//! Trains a model on a synthetic fixture and prints text explanations for a
//! few held-out images: surfaced concepts with the sign of their weight.
//!
//! cargo run --release --example explain_predictions

use privlex::datasets::Split;
use privlex::explain::{explain_all, render_report, ReportFormat, ThresholdBasis, DEFAULT_TAU};
use privlex::pipeline::split_rows;
use privlex::score::{apply_normalizer, cosine_scores, fit_normalizer, NormalizationScope};
use privlex::synth::{generate, PlantedConfig};

fn main() -> privlex::Result<()> {
    let f = generate(&PlantedConfig {
        n_images: 300,
        n_concepts: 20,
        dim: 64,
        ..Default::default()
    })?;
    let raw = cosine_scores(&f.images, &f.concepts)?;
    let (train, labels) = split_rows(&raw, &f.labels, &f.split, Split::Train)?;
    let norm = fit_normalizer(&train, NormalizationScope::PerConcept)?;
    let model = privlex::lrmodel::train(&apply_normalizer(&norm, &train)?, &labels, &norm, 0.5, 250, 0)?;

    let (test, test_labels) = split_rows(&raw, &f.labels, &f.split, Split::Test)?;
    let first: Vec<String> = test.image_ids()[..4].to_vec();
    let explanations = explain_all(&model, &test.select_ids(&first)?, DEFAULT_TAU, ThresholdBasis::Raw)?;
    print!("{}", render_report(&explanations, Some(&test_labels), ReportFormat::Text)?);
    Ok(())
}
