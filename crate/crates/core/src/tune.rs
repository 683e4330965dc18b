//! Hyperparameter search over `(C, max_iter)` maximizing validation F1-macro.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::embed::{read_json, write_json};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::lrmodel::{fit_l1_logistic, sigmoid, Design};
use crate::metrics::{confusion, report};
use crate::score::ScoreMatrix;

pub const LOG10_C_RANGE: (f64, f64) = (-10.0, 0.0);
pub const MAX_ITER_RANGE: (u32, u32) = (1, 250);
pub const DEFAULT_BUDGET: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Random,
    Tpe,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "tpe" => Ok(Strategy::Tpe),
            other => Err(Error::InvalidInput(format!("unknown search strategy `{other}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Tpe => "tpe",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    #[serde(rename = "C")]
    pub c: f64,
    pub max_iter: u32,
    pub val_f1_macro: f64,
    pub seed: u64,
    pub nonzero_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub budget: usize,
    pub trials: Vec<TrialRecord>,
    pub best: TrialRecord,
}

impl SearchResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Total order used to pick the best trial: higher F1-macro, then smaller C,
/// then smaller max_iter, then earlier trial.
pub fn better(a: &TrialRecord, b: &TrialRecord) -> Ordering {
    b.val_f1_macro
        .total_cmp(&a.val_f1_macro)
        .then(a.c.total_cmp(&b.c))
        .then(a.max_iter.cmp(&b.max_iter))
        .then(a.trial_index.cmp(&b.trial_index))
}

fn sample_random(seed: u64) -> (f64, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_c = rng.random_range(LOG10_C_RANGE.0..=LOG10_C_RANGE.1);
    let max_iter = rng.random_range(MAX_ITER_RANGE.0..=MAX_ITER_RANGE.1);
    (10f64.powf(log_c).clamp(1e-10, 1.0), max_iter)
}

struct Problem {
    train: Design,
    val: ScoreMatrix,
    val_labels: Vec<u8>,
}

impl Problem {
    fn evaluate(&self, trial_index: usize, seed: u64, c: f64, max_iter: u32) -> Result<TrialRecord> {
        let fit = fit_l1_logistic(&self.train, c, max_iter)?;
        let pred: Vec<u8> = self
            .val
            .rows()
            .map(|r| {
                let z: f64 = r.iter().zip(&fit.weights).map(|(&x, w)| x as f64 * w).sum::<f64>() + fit.bias;
                u8::from(sigmoid(z) >= 0.5)
            })
            .collect();
        let f1 = report(&confusion(&pred, &self.val_labels)?).f1_macro;
        Ok(TrialRecord {
            trial_index,
            c,
            max_iter,
            val_f1_macro: f1,
            seed,
            nonzero_count: fit.weights.iter().filter(|w| **w != 0.0).count(),
        })
    }
}

fn check_split(scores: &ScoreMatrix, labels: &LabeledDataset, what: &str) -> Result<()> {
    if !scores.is_normalized() {
        return Err(Error::InvalidInput(format!("{what} scores must be normalized")));
    }
    if scores.image_ids() != labels.image_ids.as_slice() {
        return Err(Error::IdMismatch(format!("{what} scores and labels are not aligned")));
    }
    Ok(())
}

/// Runs `budget` trials. Random trials are independent and run in parallel;
/// each draws its hyperparameters from `derive_seed(seed, trial_index)`.
pub fn search(
    train_scores: &ScoreMatrix,
    train_labels: &LabeledDataset,
    val_scores: &ScoreMatrix,
    val_labels: &LabeledDataset,
    budget: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<SearchResult> {
    if budget < 1 {
        return Err(Error::InvalidInput("budget must be at least 1".into()));
    }
    if val_labels.is_empty() || val_scores.n_images() == 0 {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    check_split(train_scores, train_labels, "training")?;
    check_split(val_scores, val_labels, "validation")?;
    if train_scores.concept_ids() != val_scores.concept_ids() {
        return Err(Error::ConceptMismatch("training and validation concepts differ".into()));
    }
    let problem = Problem {
        train: Design::from_scores(train_scores, &train_labels.labels)?,
        val: val_scores.clone(),
        val_labels: val_labels.labels.clone(),
    };

    let trials = match strategy {
        Strategy::Random => (0..budget)
            .into_par_iter()
            .map(|i| {
                let s = derive_seed(seed, i as u64);
                let (c, max_iter) = sample_random(s);
                problem.evaluate(i, s, c, max_iter)
            })
            .collect::<Result<Vec<_>>>()?,
        Strategy::Tpe => run_tpe(&problem, budget, seed)?,
    };
    let best = trials
        .iter()
        .min_by(|a, b| better(a, b))
        .cloned()
        .expect("budget is at least one");
    Ok(SearchResult {
        strategy,
        seed,
        budget,
        trials,
        best,
    })
}

fn run_tpe(problem: &Problem, budget: usize, seed: u64) -> Result<Vec<TrialRecord>> {
    let tpe_err = |e: &dyn fmt::Display| Error::InvalidInput(format!("tpe: {e}"));
    let c_range = tpe::range(LOG10_C_RANGE.0, LOG10_C_RANGE.1).map_err(|e| tpe_err(&e))?;
    let it_range =
        tpe::range(MAX_ITER_RANGE.0 as f64, MAX_ITER_RANGE.1 as f64 + 1.0).map_err(|e| tpe_err(&e))?;
    let mut opt_c = tpe::TpeOptimizer::new(tpe::parzen_estimator(), c_range);
    let mut opt_it = tpe::TpeOptimizer::new(tpe::parzen_estimator(), it_range);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(budget);
    for i in 0..budget {
        let log_c = opt_c.ask(&mut rng).map_err(|e| tpe_err(&e))?;
        let raw_it = opt_it.ask(&mut rng).map_err(|e| tpe_err(&e))?;
        let c = 10f64.powf(log_c).clamp(1e-10, 1.0);
        let max_iter = (raw_it.floor() as u32).clamp(MAX_ITER_RANGE.0, MAX_ITER_RANGE.1);
        let rec = problem.evaluate(i, derive_seed(seed, i as u64), c, max_iter)?;
        opt_c.tell(log_c, -rec.val_f1_macro).map_err(|e| tpe_err(&e))?;
        opt_it.tell(raw_it, -rec.val_f1_macro).map_err(|e| tpe_err(&e))?;
        trials.push(rec);
    }
    Ok(trials)
}
