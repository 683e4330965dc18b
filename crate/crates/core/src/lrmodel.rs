//! L1-regularized logistic regression over normalized concept scores.
//!
//! Objective: `(1/N) Σ BCE(σ(w·x + b), y) + (1/(C·N)) ‖w‖₁`, minimized by
//! full-batch proximal gradient with backtracking, starting from zero. The
//! bias is not penalized.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::embed::{read_json, write_json};
use crate::error::{Error, Result};
use crate::score::{Normalizer, ScoreMatrix};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Step-size bound on the smallest accepted step before the solver gives up.
const MIN_STEP: f64 = 1e-30;
/// Converged once no coordinate moves by more than this.
const STEP_TOL: f64 = 1e-13;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Row-major `N × n` design matrix with binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n_features: usize,
}

impl Design {
    pub fn new(x: Vec<f64>, y: Vec<f64>, n_features: usize) -> Result<Self> {
        if n_features == 0 || x.len() != y.len() * n_features {
            return Err(Error::InvalidInput(format!(
                "{} values do not form {} rows of {n_features}",
                x.len(),
                y.len()
            )));
        }
        if y.is_empty() {
            return Err(Error::InvalidInput("no training rows".into()));
        }
        Ok(Design { x, y, n_features })
    }

    pub fn from_scores(scores: &ScoreMatrix, labels: &[u8]) -> Result<Self> {
        Design::new(
            scores.values().iter().map(|&v| v as f64).collect(),
            labels.iter().map(|&l| l as f64).collect(),
            scores.n_concepts(),
        )
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Penalty weight `1/(C·N)`.
    pub fn lambda(&self, c: f64) -> f64 {
        1.0 / (c * self.n_samples() as f64)
    }

    fn margin(&self, i: usize, w: &[f64], b: f64) -> f64 {
        self.row(i).iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + b
    }

    /// Mean binary cross-entropy.
    pub fn smooth_loss(&self, w: &[f64], b: f64) -> f64 {
        let total: f64 = (0..self.n_samples())
            .map(|i| {
                let z = self.margin(i, w, b);
                softplus(z) - self.y[i] * z
            })
            .sum();
        total / self.n_samples() as f64
    }

    /// Gradient of [`Design::smooth_loss`] as `(∂w, ∂b)`.
    pub fn smooth_gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.n_samples() as f64;
        let mut gw = vec![0.0; self.n_features];
        let mut gb = 0.0;
        for i in 0..self.n_samples() {
            let r = sigmoid(self.margin(i, w, b)) - self.y[i];
            for (g, x) in gw.iter_mut().zip(self.row(i)) {
                *g += r * x;
            }
            gb += r;
        }
        gw.iter_mut().for_each(|g| *g /= n);
        (gw, gb / n)
    }

    pub fn objective(&self, w: &[f64], b: f64, c: f64) -> f64 {
        self.smooth_loss(w, b) + self.lambda(c) * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// `(1/4) · mean(1 + ‖x_i‖²)`, an upper bound on the smooth part's curvature.
    fn lipschitz_bound(&self) -> f64 {
        let sq: f64 = self.x.iter().map(|v| v * v).sum();
        0.25 * (1.0 + sq / self.n_samples() as f64)
    }
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub iterations: u32,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// Proximal gradient with backtracking for at most `max_iter` outer iterations.
pub fn fit_l1_logistic(design: &Design, c: f64, max_iter: u32) -> Result<Fit> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidInput(format!("C = {c} outside (0, 1]")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be at least 1".into()));
    }
    let lambda = design.lambda(c);
    let mut w = vec![0.0; design.n_features];
    let mut b = 0.0;
    let mut f = design.smooth_loss(&w, b);
    let mut obj = f;
    let mut trace = vec![obj];
    let mut step = 1.0 / design.lipschitz_bound();
    let mut iterations = 0;

    'outer: for it in 1..=max_iter {
        let (gw, gb) = design.smooth_gradient(&w, b);
        loop {
            let nw: Vec<f64> = w
                .iter()
                .zip(&gw)
                .map(|(wj, g)| soft_threshold(wj - step * g, step * lambda))
                .collect();
            let nb = b - step * gb;
            let nf = design.smooth_loss(&nw, nb);
            if !nf.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: it as usize });
            }
            let mut lin = gb * (nb - b);
            let mut sq = (nb - b) * (nb - b);
            for ((a, o), g) in nw.iter().zip(&w).zip(&gw) {
                lin += g * (a - o);
                sq += (a - o) * (a - o);
            }
            if nf <= f + lin + sq / (2.0 * step) {
                let nobj = nf + lambda * nw.iter().map(|v| v.abs()).sum::<f64>();
                if nobj > obj {
                    break 'outer;
                }
                let moved = nw
                    .iter()
                    .zip(&w)
                    .map(|(a, o)| (a - o).abs())
                    .fold((nb - b).abs(), f64::max);
                w = nw;
                b = nb;
                f = nf;
                obj = nobj;
                trace.push(obj);
                iterations = it;
                if moved <= STEP_TOL {
                    break 'outer;
                }
                break;
            }
            step *= 0.5;
            if step < MIN_STEP {
                break 'outer;
            }
        }
    }
    if !obj.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: iterations as usize });
    }
    Ok(Fit {
        weights: w,
        bias: b,
        objective: obj,
        iterations,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    #[serde(rename = "C")]
    pub c: f64,
    pub max_iter: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub dataset_tag: String,
    pub objective_value: f64,
    pub nonzero_count: usize,
    pub iterations: u32,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLinearModel {
    pub format_version: u32,
    pub concept_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub normalizer: Normalizer,
    pub hyper: Hyper,
    pub training_meta: TrainingMeta,
    #[serde(default)]
    pub vocab_hash: Option<String>,
}

fn check_training_input(scores: &ScoreMatrix, data: &LabeledDataset) -> Result<()> {
    if !scores.is_normalized() {
        return Err(Error::InvalidInput("training requires normalized scores".into()));
    }
    if scores.image_ids() != data.image_ids.as_slice() {
        return Err(Error::IdMismatch(
            "score rows and labels are not aligned; join them first".into(),
        ));
    }
    Ok(())
}

/// Fits the model on aligned, normalized scores. The solver is deterministic;
/// `seed` is recorded for provenance.
pub fn train(
    scores: &ScoreMatrix,
    data: &LabeledDataset,
    normalizer: &Normalizer,
    c: f64,
    max_iter: u32,
    seed: u64,
) -> Result<SparseLinearModel> {
    check_training_input(scores, data)?;
    if normalizer.concept_ids != scores.concept_ids() {
        return Err(Error::ConceptMismatch("normalizer and scores list different concepts".into()));
    }
    let design = Design::from_scores(scores, &data.labels)?;
    let fit = fit_l1_logistic(&design, c, max_iter)?;
    Ok(SparseLinearModel {
        format_version: MODEL_FORMAT_VERSION,
        concept_ids: scores.concept_ids().to_vec(),
        bias: fit.bias,
        normalizer: normalizer.clone(),
        hyper: Hyper { c, max_iter, seed },
        training_meta: TrainingMeta {
            dataset_tag: data.dataset_tag.clone(),
            objective_value: fit.objective,
            nonzero_count: fit.weights.iter().filter(|w| **w != 0.0).count(),
            iterations: fit.iterations,
            n_samples: design.n_samples(),
        },
        weights: fit.weights,
        vocab_hash: scores.vocab_hash().map(str::to_string),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSign {
    Private,
    Public,
    Zero,
}

impl WeightSign {
    pub fn of(w: f64) -> Self {
        if w > 0.0 {
            WeightSign::Private
        } else if w < 0.0 {
            WeightSign::Public
        } else {
            WeightSign::Zero
        }
    }

    pub fn symbol(self) -> char {
        match self {
            WeightSign::Private => '+',
            WeightSign::Public => '-',
            WeightSign::Zero => '0',
        }
    }
}

impl SparseLinearModel {
    pub fn n_concepts(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    /// `σ(w·x + b)` for one normalized row.
    pub fn proba_row(&self, row: &[f32]) -> f64 {
        let z: f64 = row.iter().zip(&self.weights).map(|(&x, w)| x as f64 * w).sum::<f64>() + self.bias;
        sigmoid(z)
    }

    /// Signs in concept order.
    pub fn weight_signs(&self) -> Vec<(String, WeightSign)> {
        self.concept_ids
            .iter()
            .zip(&self.weights)
            .map(|(id, &w)| (id.clone(), WeightSign::of(w)))
            .collect()
    }

    pub fn sign_of(&self, j: usize) -> WeightSign {
        WeightSign::of(self.weights[j])
    }

    /// Recomputes the training objective on the data it was fitted on.
    pub fn objective_on(&self, scores: &ScoreMatrix, data: &LabeledDataset) -> Result<f64> {
        check_training_input(scores, data)?;
        self.check_concepts(scores)?;
        let design = Design::from_scores(scores, &data.labels)?;
        Ok(design.objective(&self.weights, self.bias, self.hyper.c))
    }

    fn check_concepts(&self, scores: &ScoreMatrix) -> Result<()> {
        if scores.concept_ids() != self.concept_ids.as_slice() {
            return Err(Error::ConceptMismatch(
                "score matrix concepts differ from the model's concepts".into(),
            ));
        }
        if let (Some(model), Some(found)) = (&self.vocab_hash, scores.vocab_hash()) {
            if model != found {
                return Err(Error::VocabHashMismatch {
                    expected: model.clone(),
                    actual: found.to_string(),
                });
            }
        }
        Ok(())
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let n = self.concept_ids.len();
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if self.weights.len() != n {
            return Err(bad(format!("{} weights for {n} concepts", self.weights.len())));
        }
        if self.normalizer.concept_ids != self.concept_ids {
            return Err(bad("normalizer concepts differ from model concepts".into()));
        }
        if !self.weights.iter().chain([&self.bias]).all(|v| v.is_finite())
            || !self.training_meta.objective_value.is_finite()
        {
            return Err(bad("non-finite parameter".into()));
        }
        if self.training_meta.nonzero_count != self.nonzero_count() {
            return Err(bad("nonzero_count disagrees with weights".into()));
        }
        Ok(())
    }
}

/// Private-class probabilities, one per score row.
pub fn predict_proba(model: &SparseLinearModel, scores: &ScoreMatrix) -> Result<Vec<f64>> {
    if !scores.is_normalized() {
        return Err(Error::InvalidInput("prediction requires normalized scores".into()));
    }
    model.check_concepts(scores)?;
    Ok(scores.rows().map(|r| model.proba_row(r)).collect())
}

/// Labels from probabilities: private iff `p ≥ 0.5`.
pub fn predict_labels(proba: &[f64]) -> Vec<u8> {
    proba.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

pub fn save_model(model: &SparseLinearModel, path: &Path) -> Result<()> {
    write_json(path, model)
}

/// Loads a model. With `expected_vocab_hash`, a model trained on another
/// vocabulary (or one without a recorded hash) is rejected.
pub fn load_model(path: &Path, expected_vocab_hash: Option<&str>) -> Result<SparseLinearModel> {
    let model: SparseLinearModel = read_json(path)?;
    if model.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_FORMAT_VERSION,
            found: model.format_version,
        });
    }
    model.validate(path)?;
    if let Some(expected) = expected_vocab_hash {
        let found = model.vocab_hash.as_deref().unwrap_or("<none>");
        if found != expected {
            return Err(Error::VocabHashMismatch {
                expected: found.to_string(),
                actual: expected.to_string(),
            });
        }
    }
    Ok(model)
}
