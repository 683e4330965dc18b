//! Random and TPE search over (C, max_iter), scored by validation macro F1.
//!
//! cargo run --release --example hyperparameter_search

use privlex::datasets::Split;
use privlex::pipeline::split_rows;
use privlex::score::{apply_normalizer, cosine_scores, fit_normalizer, NormalizationScope};
use privlex::synth::{generate, PlantedConfig};
use privlex::tune::{search, Strategy};

fn main() -> privlex::Result<()> {
    let f = generate(&PlantedConfig {
        n_images: 300,
        n_concepts: 30,
        dim: 64,
        ..Default::default()
    })?;
    let raw = cosine_scores(&f.images, &f.concepts)?;
    let (train, train_labels) = split_rows(&raw, &f.labels, &f.split, Split::Train)?;
    let (val, val_labels) = split_rows(&raw, &f.labels, &f.split, Split::Val)?;
    let norm = fit_normalizer(&train, NormalizationScope::PerConcept)?;
    let (train, val) = (apply_normalizer(&norm, &train)?, apply_normalizer(&norm, &val)?);

    for strategy in [Strategy::Random, Strategy::Tpe] {
        let res = search(&train, &train_labels, &val, &val_labels, 20, strategy, 42)?;
        println!(
            "{strategy:<6} best trial {:>2}: C={:.3e} max_iter={} val F1-m={:.4} nonzero={}",
            res.best.trial_index, res.best.c, res.best.max_iter, res.best.val_f1_macro, res.best.nonzero_count
        );
    }
    Ok(())
}
