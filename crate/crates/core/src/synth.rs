//! Synthetic planted-concept fixtures.
//!
//! Concept and image embeddings are built in a shared space so that a few
//! designated concepts have cosine scores correlated with the private label
//! (correlation `rho`) while the rest are noise. Everything is derived from
//! one seed, so a fixture is reproducible bit for bit.

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datasets::{write_csv_labels, LabeledDataset, Split, SplitSpec};
use crate::embed::{save_matrix, save_matrix_manifest, EmbeddingMatrix, MatrixManifest};
use crate::error::{Error, Result};
use crate::pipeline::{
    BiasConfig, DataConfig, EmbedConfig, ExplainConfig, NormalizeConfig, PipelineConfig, TrainConfig, TuneConfig,
    VocabConfig, ZeroShotConfig,
};
use crate::tune::Strategy;
use crate::vocab::{compile_prompts, select_bottleneck, Concept, ConceptVocabulary, SelectionMode, TemplateStyle};
use crate::zeroshot::{AnnotatedImage, ConceptAnnotations};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub n_images: usize,
    pub n_concepts: usize,
    pub n_planted: usize,
    pub dim: usize,
    /// Correlation between each planted concept's latent score and the label.
    pub rho: f64,
    pub private_rate: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_images: 600,
            n_concepts: 131,
            n_planted: 3,
            dim: 256,
            rho: 0.9,
            private_rate: 0.45,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedFixture {
    /// Hierarchical vocabulary; its bottleneck selection is `selected`.
    pub vocab: ConceptVocabulary,
    pub selected: ConceptVocabulary,
    pub planted: Vec<String>,
    pub images: EmbeddingMatrix,
    pub concepts: EmbeddingMatrix,
    pub labels: LabeledDataset,
    pub split: SplitSpec,
    pub annotations: ConceptAnnotations,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Removes the components along each (orthonormal) vector of `basis`, then normalizes.
fn orthogonal_unit(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    for b in basis {
        let p = dot(&v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
    normalize(&mut v);
    v
}

/// A three-level vocabulary: one level-1 root, a level-2 group per ten
/// concepts, and `n` level-3 concepts.
pub fn synthetic_vocabulary(n: usize) -> Result<ConceptVocabulary> {
    let mut concepts = vec![Concept {
        level: 1,
        ..Concept::new("synthetic", "synthetic data", "Synthetic personal data.")
    }];
    for g in 0..n.div_ceil(10) {
        concepts.push(Concept {
            level: 2,
            parent_id: Some("synthetic".into()),
            ..Concept::new(format!("group-{g:02}"), format!("group {g}"), "")
        });
    }
    for j in 0..n {
        concepts.push(Concept {
            level: 3,
            parent_id: Some(format!("group-{:02}", j / 10)),
            ..Concept::new(
                format!("concept-{j:03}"),
                format!("concept {j}"),
                format!("Information about synthetic concept {j}."),
            )
        });
    }
    ConceptVocabulary::new(concepts, TemplateStyle::Description, "synthetic")
}

pub fn generate(cfg: &PlantedConfig) -> Result<PlantedFixture> {
    if cfg.n_planted == 0 || cfg.n_planted > cfg.n_concepts || cfg.dim < cfg.n_planted + 8 {
        return Err(Error::InvalidInput("planted fixture dimensions are inconsistent".into()));
    }
    if !(0.0..=1.0).contains(&cfg.rho) || cfg.n_images < 10 {
        return Err(Error::InvalidInput("rho must lie in [0, 1] and n_images ≥ 10".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = synthetic_vocabulary(cfg.n_concepts)?;
    let selected = select_bottleneck(&vocab, SelectionMode::HierarchyRule)?;
    let concept_ids = selected.concept_ids();

    // planted concepts spread across the vocabulary
    let planted_idx: Vec<usize> = (0..cfg.n_planted)
        .map(|p| (p * cfg.n_concepts) / cfg.n_planted + cfg.n_concepts / (2 * cfg.n_planted))
        .collect();

    // shared direction g, one private direction per planted concept
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..=cfg.n_planted {
        let v = orthogonal_unit(gaussian(&mut rng, cfg.dim), &basis);
        basis.push(v);
    }
    let g = basis[0].clone();
    let (cos_t, sin_t) = (0.4f64, (1.0f64 - 0.16).sqrt());

    let mut concept_rows = Vec::with_capacity(cfg.n_concepts);
    for j in 0..cfg.n_concepts {
        let dir = match planted_idx.iter().position(|&p| p == j) {
            Some(p) => basis[p + 1].clone(),
            None => orthogonal_unit(gaussian(&mut rng, cfg.dim), &basis),
        };
        concept_rows.push(g.iter().zip(&dir).map(|(a, b)| (cos_t * a + sin_t * b) as f32).collect::<Vec<_>>());
    }

    let noise_w = (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut image_rows = Vec::with_capacity(cfg.n_images);
    let mut labels = Vec::with_capacity(cfg.n_images);
    let mut annotations = Vec::with_capacity(cfg.n_images);
    let image_ids: Vec<String> = (0..cfg.n_images).map(|i| format!("img-{i:04}")).collect();
    for id in &image_ids {
        let private = rng.random_bool(cfg.private_rate);
        let z = if private { 1.0 } else { -1.0 };
        let v = orthogonal_unit(gaussian(&mut rng, cfg.dim), &basis);
        let mut row: Vec<f64> = g.iter().zip(&v).map(|(a, b)| 0.55 * a + 0.8 * b).collect();
        let mut present = std::collections::BTreeSet::new();
        for (p, &j) in planted_idx.iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            let latent = cfg.rho * z + noise_w * e;
            if latent > 0.0 {
                present.insert(concept_ids[j].clone());
            }
            let b = 0.15 + 0.1 * latent;
            row.iter_mut().zip(&basis[p + 1]).for_each(|(x, q)| *x += b * q);
        }
        for (j, cid) in concept_ids.iter().enumerate() {
            if !planted_idx.contains(&j) && rng.random_bool(0.1) {
                present.insert(cid.clone());
            }
        }
        image_rows.push(row.into_iter().map(|x| x as f32).collect::<Vec<_>>());
        labels.push(u8::from(private));
        annotations.push(AnnotatedImage {
            image_id: id.clone(),
            concepts: present,
        });
    }

    let mut order: Vec<usize> = (0..cfg.n_images).collect();
    for i in (1..order.len()).rev() {
        let k = rng.random_range(0..=i);
        order.swap(i, k);
    }
    let n_train = cfg.n_images * 6 / 10;
    let n_val = cfg.n_images * 2 / 10;
    let pick = |r: std::ops::Range<usize>| -> Vec<String> {
        let mut ids: Vec<String> = order[r].iter().map(|&i| image_ids[i].clone()).collect();
        ids.sort();
        ids
    };
    let split = SplitSpec {
        dataset_tag: "synthetic".into(),
        train: pick(0..n_train),
        val: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..cfg.n_images),
    };

    Ok(PlantedFixture {
        planted: planted_idx.iter().map(|&j| concept_ids[j].clone()).collect(),
        images: EmbeddingMatrix::from_rows(image_ids.clone(), image_rows, cfg.dim)?,
        concepts: EmbeddingMatrix::from_rows(concept_ids, concept_rows, cfg.dim)?,
        labels: LabeledDataset::new(image_ids, labels, Split::Train)?.with_tag("synthetic"),
        split,
        annotations: ConceptAnnotations::new(annotations)?,
        vocab,
        selected,
    })
}

/// Paths written by [`write_fixture`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub vocab: PathBuf,
    pub images: PathBuf,
    pub concepts: PathBuf,
    pub labels: PathBuf,
    pub split: PathBuf,
    pub annotations: PathBuf,
    pub config: PathBuf,
}

/// Writes the fixture and a `pipeline.toml` that runs every stage on it
/// (tuning with `budget` random trials).
pub fn write_fixture(dir: &Path, fixture: &PlantedFixture, seed: u64, budget: usize) -> Result<FixturePaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = FixturePaths {
        dir: dir.to_path_buf(),
        vocab: dir.join("vocab.jsonl"),
        images: dir.join("images.pvx"),
        concepts: dir.join("concepts.pvx"),
        labels: dir.join("labels.csv"),
        split: dir.join("split.json"),
        annotations: dir.join("annotations.jsonl"),
        config: dir.join("pipeline.toml"),
    };
    fixture.vocab.write_jsonl(&paths.vocab)?;
    save_matrix(&fixture.images, &paths.images)?;
    save_matrix_manifest(
        &paths.images,
        &MatrixManifest {
            kind: "image".into(),
            ..Default::default()
        },
    )?;
    save_matrix(&fixture.concepts, &paths.concepts)?;
    let prompts = compile_prompts(&fixture.selected);
    debug_assert_eq!(prompts.len(), fixture.concepts.len());
    save_matrix_manifest(
        &paths.concepts,
        &MatrixManifest {
            kind: "text".into(),
            vocab_hash: Some(fixture.selected.content_hash().to_string()),
            checkpoint: Some("synthetic".into()),
        },
    )?;
    write_csv_labels(&paths.labels, &fixture.labels)?;
    fixture.split.save(&paths.split)?;
    fixture.annotations.save(&paths.annotations)?;

    let cfg = PipelineConfig {
        seed,
        cache_dir: "cache".into(),
        out_dir: "out".into(),
        stages: None,
        vocab: VocabConfig {
            path: "vocab.jsonl".into(),
            template: TemplateStyle::Description,
            selection: SelectionMode::HierarchyRule,
        },
        embed: EmbedConfig {
            image_embeddings: Some("images.pvx".into()),
            text_embeddings: Some("concepts.pvx".into()),
            image_model: None,
            image_list: None,
            text_model: None,
            batch_size: 16,
        },
        data: DataConfig {
            labels: "labels.csv".into(),
            schema: "direct-binary".into(),
            safe_attribute: None,
            split: "split.json".into(),
        },
        normalize: NormalizeConfig::default(),
        tune: Some(TuneConfig {
            budget,
            strategy: Strategy::Random,
        }),
        train: TrainConfig::default(),
        explain: ExplainConfig::default(),
        zeroshot: Some(ZeroShotConfig {
            annotations: "annotations.jsonl".into(),
            style_tag: None,
        }),
        bias: Some(BiasConfig {
            models: vec![],
            svg_rows: 40,
        }),
    };
    std::fs::write(&paths.config, cfg.to_toml()?).map_err(|e| Error::io(&paths.config, e))?;
    Ok(paths)
}
