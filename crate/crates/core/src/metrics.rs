//! Binary classification metrics. The private class is the positive class.
//!
//! Any metric whose denominator is zero is reported as 0 and listed in
//! [`ClassificationReport::degenerate`] instead of failing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts over paired predictions and ground truth (1 = private).
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no predictions to evaluate".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateMetric {
    Accuracy,
    PrecisionPrivate,
    RecallPrivate,
    F1Private,
    PrecisionPublic,
    RecallPublic,
    F1Public,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub acc: f64,
    pub ba: f64,
    pub p_priv: f64,
    pub r_priv: f64,
    pub f1_priv: f64,
    pub p_pub: f64,
    pub r_pub: f64,
    pub f1_pub: f64,
    pub f1_macro: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<DegenerateMetric>,
}

fn ratio(num: u64, den: u64, which: DegenerateMetric, flags: &mut Vec<DegenerateMetric>) -> f64 {
    if den == 0 {
        flags.push(which);
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64, which: DegenerateMetric, flags: &mut Vec<DegenerateMetric>) -> f64 {
    if p + r == 0.0 {
        flags.push(which);
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn report(c: &ConfusionCounts) -> ClassificationReport {
    use DegenerateMetric::*;
    let mut flags = Vec::new();
    let acc = ratio(c.tp + c.tn, c.total(), Accuracy, &mut flags);
    let p_priv = ratio(c.tp, c.tp + c.fp, PrecisionPrivate, &mut flags);
    let r_priv = ratio(c.tp, c.tp + c.fn_, RecallPrivate, &mut flags);
    let p_pub = ratio(c.tn, c.tn + c.fn_, PrecisionPublic, &mut flags);
    let r_pub = ratio(c.tn, c.tn + c.fp, RecallPublic, &mut flags);
    let f1_priv = f1(p_priv, r_priv, F1Private, &mut flags);
    let f1_pub = f1(p_pub, r_pub, F1Public, &mut flags);
    ClassificationReport {
        acc,
        ba: (r_priv + r_pub) / 2.0,
        p_priv,
        r_priv,
        f1_priv,
        p_pub,
        r_pub,
        f1_pub,
        f1_macro: (f1_priv + f1_pub) / 2.0,
        degenerate: flags,
    }
}

/// Balanced accuracy straight from counts.
pub fn balanced_accuracy(c: &ConfusionCounts) -> f64 {
    report(c).ba
}

/// Per-class table layout used by `privlex evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: u64,
    pub counts: ConfusionCounts,
    pub overall: Overall,
    pub private: ClassMetrics,
    pub public: ClassMetrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<DegenerateMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub acc: f64,
    pub ba: f64,
    pub f1_macro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvaluationReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let r = report(&counts);
        EvaluationReport {
            n: counts.total(),
            counts,
            overall: Overall {
                acc: r.acc,
                ba: r.ba,
                f1_macro: r.f1_macro,
            },
            private: ClassMetrics {
                precision: r.p_priv,
                recall: r.r_priv,
                f1: r.f1_priv,
            },
            public: ClassMetrics {
                precision: r.p_pub,
                recall: r.r_pub,
                f1: r.f1_pub,
            },
            degenerate: r.degenerate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_basics() {
        let c = confusion(&[1, 0], &[1, 0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        let c = confusion(&[0, 1], &[1, 0]).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn hand_computed_fixture() {
        let r = report(&ConfusionCounts { tp: 3, fn_: 1, tn: 4, fp: 2 });
        assert_eq!(r.r_priv, 0.75);
        assert!((r.r_pub - 0.6667).abs() < 5e-5);
        assert!((r.ba - 0.7083).abs() < 5e-5);
        assert!(r.degenerate.is_empty());
    }

    #[test]
    fn all_private_is_flagged_on_public_side() {
        let r = report(&ConfusionCounts { tp: 5, ..Default::default() });
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.r_priv, 1.0);
        assert!(r.degenerate.contains(&DegenerateMetric::RecallPublic));
        assert!(r.degenerate.contains(&DegenerateMetric::PrecisionPublic));
        assert_eq!(r.r_pub, 0.0);
    }

    #[test]
    fn balanced_correct_predictions() {
        let r = report(&ConfusionCounts { tp: 7, tn: 7, fp: 3, fn_: 3 });
        assert_eq!(r.acc, r.ba);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_label_swap_symmetric(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let c = ConfusionCounts { tp, fp, tn, fn_ };
            let r = report(&c);
            for v in [r.acc, r.ba, r.p_priv, r.r_priv, r.f1_priv, r.p_pub, r.r_pub, r.f1_pub, r.f1_macro] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let swapped = report(&ConfusionCounts { tp: tn, tn: tp, fp: fn_, fn_: fp });
            prop_assert_eq!(r.ba, swapped.ba);
            prop_assert_eq!(r.f1_macro, swapped.f1_macro);
        }
    }
}
