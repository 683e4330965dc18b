//! Cosine concept scores on a synthetic fixture and the train-fitted
//! min-max normalizer applied to held-out rows.
//!
//! cargo run --example concept_scores

use privlex::datasets::Split;
use privlex::pipeline::split_rows;
use privlex::score::{apply_normalizer, cosine_scores, fit_normalizer, NormalizationScope};
use privlex::synth::{generate, PlantedConfig};

fn main() -> privlex::Result<()> {
    let f = generate(&PlantedConfig {
        n_images: 200,
        n_concepts: 12,
        dim: 64,
        ..Default::default()
    })?;
    let raw = cosine_scores(&f.images, &f.concepts)?;
    let (train, _) = split_rows(&raw, &f.labels, &f.split, Split::Train)?;
    let (test, _) = split_rows(&raw, &f.labels, &f.split, Split::Test)?;
    let norm = fit_normalizer(&train, NormalizationScope::PerConcept)?;
    let test_norm = apply_normalizer(&norm, &test)?;

    println!("{:<12} {:>8} {:>8} {:>10} {:>10}", "concept", "min", "max", "raw[0]", "norm[0]");
    for (j, id) in raw.concept_ids().iter().enumerate() {
        println!(
            "{id:<12} {:>8.4} {:>8.4} {:>10.4} {:>10.4}",
            norm.min[j],
            norm.max[j],
            test.get(0, j),
            test_norm.get(0, j)
        );
    }
    println!("planted: {:?}", f.planted);
    Ok(())
}
