//! Concept scores: cosine similarity between image and concept embeddings,
//! and the min-max normalizer that maps them into `[0, 1]` for the classifier.
//!
//! On disk a score matrix is a `PVX1` container with three sidecars:
//! `<file>.ids.json` (image ids), `<file>.concepts.json` (concept ids in
//! vocabulary order) and `<file>.manifest.json` (`normalized` flag and the
//! vocabulary hash, when known).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{read_container, read_json, sidecar_path, write_container, write_json, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Images × concepts matrix of `f32` scores, raw (`[-1, 1]`) or normalized (`[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    image_ids: Vec<String>,
    concept_ids: Vec<String>,
    values: Vec<f32>,
    normalized: bool,
    vocab_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreManifest {
    kind: String,
    normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_hash: Option<String>,
}

impl ScoreMatrix {
    pub fn new(image_ids: Vec<String>, concept_ids: Vec<String>, values: Vec<f32>, normalized: bool) -> Result<Self> {
        if values.len() != image_ids.len() * concept_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{}x{} score matrix needs {} values, got {}",
                image_ids.len(),
                concept_ids.len(),
                image_ids.len() * concept_ids.len(),
                values.len()
            )));
        }
        crate::embed::check_unique(&image_ids)?;
        crate::embed::check_unique(&concept_ids)?;
        let (lo, hi) = if normalized { (0.0, 1.0) } else { (-1.0 - 1e-6, 1.0 + 1e-6) };
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(lo..=hi).contains(*v)) {
            let row = i / concept_ids.len().max(1);
            return Err(Error::InvalidInput(format!(
                "score {v} for image `{}` outside [{lo}, {hi}]",
                image_ids[row]
            )));
        }
        Ok(ScoreMatrix {
            image_ids,
            concept_ids,
            values,
            normalized,
            vocab_hash: None,
        })
    }

    pub fn with_vocab_hash(mut self, hash: Option<String>) -> Self {
        self.vocab_hash = hash;
        self
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn concept_ids(&self) -> &[String] {
        &self.concept_ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn vocab_hash(&self) -> Option<&str> {
        self.vocab_hash.as_deref()
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.concept_ids.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.concept_ids.len().max(1)).take(self.image_ids.len())
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f32> + '_ {
        self.rows().map(move |r| r[j])
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.concept_ids.len() + j]
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> ScoreMatrix {
        let n = self.concept_ids.len();
        let mut values = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        ScoreMatrix {
            image_ids: indices.iter().map(|&i| self.image_ids[i].clone()).collect(),
            concept_ids: self.concept_ids.clone(),
            values,
            normalized: self.normalized,
            vocab_hash: self.vocab_hash.clone(),
        }
    }

    /// Rows whose image id is in `ids`, in `ids` order; unknown ids are an error.
    pub fn select_ids(&self, ids: &[String]) -> Result<ScoreMatrix> {
        let index: std::collections::HashMap<&str, usize> =
            self.image_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::IdMismatch(format!("image `{id}` has no score row")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_rows(&rows))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, self.n_images(), self.n_concepts(), &self.values)?;
        write_json(&sidecar_path(path, ".ids.json"), &self.image_ids)?;
        write_json(&sidecar_path(path, ".concepts.json"), &self.concept_ids)?;
        write_json(
            &sidecar_path(path, ".manifest.json"),
            &ScoreManifest {
                kind: "scores".into(),
                normalized: self.normalized,
                vocab_hash: self.vocab_hash.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (rows, dim, values) = read_container(path)?;
        let image_ids: Vec<String> = read_json(&sidecar_path(path, ".ids.json"))?;
        let concept_ids: Vec<String> = read_json(&sidecar_path(path, ".concepts.json"))?;
        let manifest: ScoreManifest = read_json(&sidecar_path(path, ".manifest.json"))?;
        if image_ids.len() != rows || concept_ids.len() != dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "sidecars list {}x{} ids but payload is {rows}x{dim}",
                    image_ids.len(),
                    concept_ids.len()
                ),
            });
        }
        Ok(Self::new(image_ids, concept_ids, values, manifest.normalized)?.with_vocab_hash(manifest.vocab_hash))
    }
}

/// `c_ij = I_i · T_j / (‖I_i‖ ‖T_j‖)`, accumulated in `f64`.
pub fn cosine_scores(images: &EmbeddingMatrix, concepts: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    if images.dim() != concepts.dim() {
        return Err(Error::DimensionMismatch {
            expected: concepts.dim(),
            actual: images.dim(),
        });
    }
    let norms = |m: &EmbeddingMatrix| -> Result<Vec<f64>> {
        m.rows()
            .zip(m.ids())
            .map(|(r, id)| {
                let n = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                if n > 0.0 {
                    Ok(n)
                } else {
                    Err(Error::ZeroNorm { id: id.clone() })
                }
            })
            .collect()
    };
    let image_norms = norms(images)?;
    let concept_norms = norms(concepts)?;
    let n = concepts.len();
    let concept_norms = &concept_norms;
    let values: Vec<f32> = (0..images.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = images.row(i);
            let na = image_norms[i];
            (0..n).map(move |j| {
                let b = concepts.row(j);
                let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
                (dot / (na * concept_norms[j])).clamp(-1.0, 1.0) as f32
            })
        })
        .collect();
    ScoreMatrix::new(images.ids().to_vec(), concepts.ids().to_vec(), values, false)
}

/// Whether min/max are taken per concept column or over the whole matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationScope {
    #[default]
    PerConcept,
    Global,
}

impl std::str::FromStr for NormalizationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-concept" | "concept" => Ok(NormalizationScope::PerConcept),
            "global" => Ok(NormalizationScope::Global),
            other => Err(Error::InvalidInput(format!("unknown normalization scope `{other}`"))),
        }
    }
}

/// Per-concept min/max fitted on training scores and frozen afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub concept_ids: Vec<String>,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    #[serde(default)]
    pub scope: NormalizationScope,
}

pub fn fit_normalizer(train: &ScoreMatrix, scope: NormalizationScope) -> Result<Normalizer> {
    if train.is_normalized() {
        return Err(Error::InvalidInput("normalizer must be fitted on raw scores".into()));
    }
    if train.n_images() == 0 || train.n_concepts() == 0 {
        return Err(Error::InvalidInput("cannot fit a normalizer on an empty matrix".into()));
    }
    let n = train.n_concepts();
    let mut min = vec![f32::INFINITY; n];
    let mut max = vec![f32::NEG_INFINITY; n];
    for row in train.rows() {
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    if scope == NormalizationScope::Global {
        let lo = min.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = max.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        min.fill(lo);
        max.fill(hi);
    }
    Ok(Normalizer {
        concept_ids: train.concept_ids().to_vec(),
        min,
        max,
        scope,
    })
}

impl Normalizer {
    /// Maps one raw score of concept `j` into `[0, 1]`.
    pub fn normalize_value(&self, j: usize, v: f32) -> f32 {
        let (lo, hi) = (self.min[j] as f64, self.max[j] as f64);
        if hi <= lo {
            return 0.5;
        }
        ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) as f32
    }

    pub fn normalize_row(&self, row: &[f32]) -> Vec<f32> {
        row.iter().enumerate().map(|(j, &v)| self.normalize_value(j, v)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let n: Normalizer = read_json(path)?;
        if n.min.len() != n.concept_ids.len() || n.max.len() != n.concept_ids.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "min/max length differs from concept count".into(),
            });
        }
        if n.min.iter().zip(&n.max).any(|(a, b)| a > b) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "min exceeds max".into(),
            });
        }
        Ok(n)
    }
}

/// `(v - min_j) / (max_j - min_j)` clamped to `[0, 1]`; constant columns map to 0.5.
pub fn apply_normalizer(norm: &Normalizer, scores: &ScoreMatrix) -> Result<ScoreMatrix> {
    if scores.is_normalized() {
        return Err(Error::InvalidInput("scores are already normalized".into()));
    }
    if norm.concept_ids != scores.concept_ids() {
        return Err(Error::ConceptMismatch(
            "normalizer and score matrix list different concepts".into(),
        ));
    }
    let values = scores.rows().flat_map(|r| norm.normalize_row(r)).collect();
    Ok(ScoreMatrix::new(scores.image_ids.clone(), scores.concept_ids.clone(), values, true)?
        .with_vocab_hash(scores.vocab_hash.clone()))
}
