//! Per-image explanations: the top-k concepts by score, each tagged with the
//! sign of its model weight, plus the private-class probability.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, PRIVATE};
use crate::error::{Error, Result};
use crate::lrmodel::{SparseLinearModel, WeightSign};
use crate::score::{apply_normalizer, ScoreMatrix};

pub const DEFAULT_TAU: f64 = 0.245;
pub const MIN_CONCEPTS: usize = 3;

/// Which scores are compared against τ and ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdBasis {
    #[default]
    Raw,
    Normalized,
}

impl FromStr for ThresholdBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ThresholdBasis::Raw),
            "normalized" => Ok(ThresholdBasis::Normalized),
            other => Err(Error::InvalidInput(format!("unknown threshold basis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationItem {
    pub concept_id: String,
    pub score: f32,
    pub sign: WeightSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_id: String,
    pub private_probability: f64,
    pub tau: f64,
    pub k: usize,
    pub items: Vec<ExplanationItem>,
}

/// `k = min(max(#{j : c_j > τ}, 3), n)`.
pub fn surface_count(row: &[f32], tau: f64) -> Result<usize> {
    let n = row.len();
    if n < MIN_CONCEPTS {
        return Err(Error::InvalidInput(format!(
            "explanations need at least {MIN_CONCEPTS} concepts, vocabulary has {n}"
        )));
    }
    let tau = tau as f32;
    let above = row.iter().filter(|&&c| c > tau).count();
    Ok(above.max(MIN_CONCEPTS).min(n))
}

/// Indices of the `k` highest scores, descending, ties in index order.
pub fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn explain_image(
    model: &SparseLinearModel,
    image_id: &str,
    raw_row: &[f32],
    norm_row: &[f32],
    tau: f64,
    basis: ThresholdBasis,
) -> Result<Explanation> {
    let n = model.n_concepts();
    if raw_row.len() != n || norm_row.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: if raw_row.len() != n { raw_row.len() } else { norm_row.len() },
        });
    }
    let ranked = match basis {
        ThresholdBasis::Raw => raw_row,
        ThresholdBasis::Normalized => norm_row,
    };
    let k = surface_count(ranked, tau)?;
    let items = top_k(ranked, k)
        .into_iter()
        .map(|j| ExplanationItem {
            concept_id: model.concept_ids[j].clone(),
            score: ranked[j],
            sign: model.sign_of(j),
        })
        .collect();
    Ok(Explanation {
        image_id: image_id.to_string(),
        private_probability: model.proba_row(norm_row),
        tau,
        k,
        items,
    })
}

/// Explains every row of a raw score matrix, normalizing with the model's
/// frozen normalizer.
pub fn explain_all(
    model: &SparseLinearModel,
    raw: &ScoreMatrix,
    tau: f64,
    basis: ThresholdBasis,
) -> Result<Vec<Explanation>> {
    if raw.is_normalized() {
        return Err(Error::InvalidInput("explanations need raw cosine scores".into()));
    }
    if raw.concept_ids() != model.concept_ids.as_slice() {
        return Err(Error::ConceptMismatch("score matrix concepts differ from the model's".into()));
    }
    let norm = apply_normalizer(&model.normalizer, raw)?;
    (0..raw.n_images())
        .into_par_iter()
        .map(|i| explain_image(model, &raw.image_ids()[i], raw.row(i), norm.row(i), tau, basis))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
    Html,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "html" => Ok(ReportFormat::Html),
            other => Err(Error::InvalidInput(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Serialize)]
struct JsonItem<'a> {
    concept: &'a str,
    score: f32,
    sign: WeightSign,
}

#[derive(Serialize)]
struct JsonEntry<'a> {
    image_id: &'a str,
    p_private: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'static str>,
    k: usize,
    items: Vec<JsonItem<'a>>,
}

fn label_name(l: u8) -> &'static str {
    if l == PRIVATE {
        "private"
    } else {
        "public"
    }
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_report(
    explanations: &[Explanation],
    labels: Option<&LabeledDataset>,
    format: ReportFormat,
) -> Result<String> {
    let label_of = |id: &str| labels.and_then(|l| l.label_of(id)).map(label_name);
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            for e in explanations {
                let _ = write!(out, "{}  p_private={:.4}", e.image_id, e.private_probability);
                if let Some(l) = label_of(&e.image_id) {
                    let _ = write!(out, "  label={l}");
                }
                let _ = writeln!(out, "  k={}", e.k);
                for it in &e.items {
                    let _ = writeln!(out, "  {} {} ({:.4})", it.sign.symbol(), it.concept_id, it.score);
                }
            }
        }
        ReportFormat::Json => {
            let entries: Vec<JsonEntry> = explanations
                .iter()
                .map(|e| JsonEntry {
                    image_id: &e.image_id,
                    p_private: e.private_probability,
                    label: label_of(&e.image_id),
                    k: e.k,
                    items: e
                        .items
                        .iter()
                        .map(|it| JsonItem {
                            concept: &it.concept_id,
                            score: it.score,
                            sign: it.sign,
                        })
                        .collect(),
                })
                .collect();
            out = serde_json::to_string_pretty(&entries)?;
            out.push('\n');
        }
        ReportFormat::Html => {
            out.push_str(concat!(
                "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>privlex explanations</title>\n",
                "<style>.private{color:#e07000}.public{color:#1f5fbf}.zero{color:#8b5a2b}</style>\n",
                "</head><body>\n"
            ));
            for e in explanations {
                let _ = write!(
                    out,
                    "<section><h2>{}</h2><p>p_private = {:.4}",
                    html_escape(&e.image_id),
                    e.private_probability
                );
                if let Some(l) = label_of(&e.image_id) {
                    let _ = write!(out, ", label = {l}");
                }
                out.push_str("</p><ul>\n");
                for it in &e.items {
                    let class = match it.sign {
                        WeightSign::Private => "private",
                        WeightSign::Public => "public",
                        WeightSign::Zero => "zero",
                    };
                    let _ = writeln!(
                        out,
                        "<li class=\"{class}\">{} {} ({:.4})</li>",
                        it.sign.symbol(),
                        html_escape(&it.concept_id),
                        it.score
                    );
                }
                out.push_str("</ul></section>\n");
            }
            out.push_str("</body></html>\n");
        }
    }
    Ok(out)
}
