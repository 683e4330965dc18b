//! Scales the weights of two models trained on different synthetic datasets
//! and writes the side-by-side comparison as CSV and SVG.
//!
//! cargo run --release --example bias_comparison -- /tmp/bias

use std::path::PathBuf;

use privlex::bias::{compare, scale_weights};
use privlex::datasets::Split;
use privlex::pipeline::split_rows;
use privlex::score::{apply_normalizer, cosine_scores, fit_normalizer, NormalizationScope};
use privlex::synth::{generate, PlantedConfig};

fn main() -> privlex::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "bias-example".into()));
    std::fs::create_dir_all(&out).map_err(|e| privlex::Error::io(&out, e))?;
    let mut profiles = Vec::new();
    for (tag, seed) in [("dataset-a", 1), ("dataset-b", 2)] {
        let f = generate(&PlantedConfig {
            n_images: 300,
            n_concepts: 24,
            dim: 64,
            seed,
            ..Default::default()
        })?;
        let raw = cosine_scores(&f.images, &f.concepts)?;
        let (train, labels) = split_rows(&raw, &f.labels, &f.split, Split::Train)?;
        let norm = fit_normalizer(&train, NormalizationScope::PerConcept)?;
        let labels = labels.with_tag(tag);
        let model = privlex::lrmodel::train(&apply_normalizer(&norm, &train)?, &labels, &norm, 0.3, 250, seed)?;
        profiles.push(scale_weights(&model));
    }
    let cmp = compare(&profiles)?;
    for row in cmp.rows.iter().take(6) {
        println!("{:<12} {:?} {}", row.concept_id, row.scaled, row.agreement.as_str());
    }
    cmp.write_csv(&out.join("bias.csv"))?;
    cmp.write_svg(&out.join("bias.svg"), 20)?;
    println!("wrote {}", out.display());
    Ok(())
}
