//! Per-concept zero-shot thresholds: calibrate on train images, evaluate on
//! test images, and compare two sets of concept embeddings as if they came
//! from two description styles.
//!
//! cargo run --example zeroshot_detection

use privlex::datasets::Split;
use privlex::score::cosine_scores;
use privlex::synth::{generate, PlantedConfig};
use privlex::zeroshot::{calibrate_thresholds, compare_styles, evaluate_detection};

fn main() -> privlex::Result<()> {
    let cfg = PlantedConfig {
        n_images: 300,
        n_concepts: 12,
        dim: 64,
        ..Default::default()
    };
    let f = generate(&cfg)?;
    let noisier = generate(&PlantedConfig { rho: 0.6, ..cfg })?;

    let mut reports = Vec::new();
    for (style, fixture) in [("description", &f), ("information-about", &noisier)] {
        let raw = cosine_scores(&fixture.images, &fixture.concepts)?;
        let table = calibrate_thresholds(&raw.select_ids(fixture.split.ids(Split::Train))?, &fixture.annotations, style)?;
        let report = evaluate_detection(&raw.select_ids(fixture.split.ids(Split::Test))?, &fixture.annotations, &table)?;
        println!("{style}: mean BA {:.4}, median BA {:.4}", report.mean_ba, report.median_ba);
        for c in report.per_concept.iter().filter(|c| f.planted.contains(&c.concept_id)) {
            println!("  {} BA {:.4}", c.concept_id, c.ba);
        }
        reports.push(report);
    }
    let cmp = compare_styles(&reports[0], &reports[1]);
    println!("median BA difference {:.4}, median |difference| {:.4}", cmp.median_delta, cmp.median_abs_delta);
    Ok(())
}
