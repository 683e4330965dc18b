//! Zero-shot concept detection: one threshold per concept, calibrated for
//! balanced accuracy on training images, then evaluated on held-out images.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{read_json, write_json};
use crate::error::{Error, Result};
use crate::metrics::{report, ConfusionCounts};
use crate::score::ScoreMatrix;

/// Ground-truth concepts present in each image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptAnnotations {
    pub images: Vec<AnnotatedImage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub concepts: BTreeSet<String>,
}

impl ConceptAnnotations {
    pub fn new(images: Vec<AnnotatedImage>) -> Result<Self> {
        let ids: Vec<String> = images.iter().map(|i| i.image_id.clone()).collect();
        crate::embed::check_unique(&ids)?;
        Ok(ConceptAnnotations { images })
    }

    /// Reads JSON Lines `{image_id, concepts:[...]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut images = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let img: AnnotatedImage = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            images.push(img);
        }
        ConceptAnnotations::new(images)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for img in &self.images {
            out.push_str(&serde_json::to_string(img)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Concept ids not in `vocabulary`.
    pub fn unknown_concepts(&self, vocabulary: &[String]) -> Vec<String> {
        let known: HashSet<&str> = vocabulary.iter().map(String::as_str).collect();
        let mut unknown: BTreeSet<&str> = BTreeSet::new();
        for img in &self.images {
            unknown.extend(img.concepts.iter().map(String::as_str).filter(|c| !known.contains(c)));
        }
        unknown.into_iter().map(str::to_string).collect()
    }

    /// Score rows paired with their annotation sets, in score order.
    fn align<'a>(&'a self, scores: &ScoreMatrix) -> Result<Vec<(usize, &'a BTreeSet<String>)>> {
        let unknown = self.unknown_concepts(scores.concept_ids());
        if !unknown.is_empty() {
            return Err(Error::ConceptMismatch(format!(
                "annotations use concepts outside the vocabulary: {}",
                unknown.join(", ")
            )));
        }
        let index: HashMap<&str, &BTreeSet<String>> =
            self.images.iter().map(|i| (i.image_id.as_str(), &i.concepts)).collect();
        let rows: Vec<_> = scores
            .image_ids()
            .iter()
            .enumerate()
            .filter_map(|(i, id)| index.get(id.as_str()).map(|s| (i, *s)))
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyIntersection);
        }
        if rows.len() < scores.n_images() {
            log::warn!("{} scored images have no annotation", scores.n_images() - rows.len());
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub concept_id: String,
    pub threshold: f64,
    pub train_ba: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedConcept {
    pub concept_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub description_style_tag: String,
    pub entries: Vec<ThresholdEntry>,
    #[serde(default)]
    pub skipped: Vec<SkippedConcept>,
}

impl ThresholdTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: ThresholdTable = read_json(path)?;
        if let Some(e) = t.entries.iter().find(|e| !e.threshold.is_finite()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("non-finite threshold for `{}`", e.concept_id),
            });
        }
        Ok(t)
    }

    pub fn get(&self, concept_id: &str) -> Option<&ThresholdEntry> {
        self.entries.iter().find(|e| e.concept_id == concept_id)
    }
}

fn counts_for(scores: &[f32], positive: &[bool], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&s, &p) in scores.iter().zip(positive) {
        match (s as f64 > threshold, p) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Candidate thresholds: midpoints between consecutive distinct scores, then
/// the maximum score (detects nothing).
pub fn candidate_thresholds(scores: &[f32]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut out: Vec<f64> = distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    if let Some(&max) = distinct.last() {
        out.push(max);
    }
    out
}

/// Best-BA threshold for one concept. Among equally good candidates the
/// median one (lower median for an even count) wins.
pub fn calibrate_concept(scores: &[f32], positive: &[bool]) -> Option<(f64, f64)> {
    let pos = positive.iter().filter(|&&p| p).count() as u64;
    let neg = positive.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk candidates from low to high; everything strictly above the
    // candidate is detected.
    let candidates = candidate_thresholds(scores);
    let mut ba = Vec::with_capacity(candidates.len());
    let (mut tp, mut fp) = (pos, neg);
    let mut next = 0;
    for &t in &candidates {
        while next < order.len() && scores[order[next]] as f64 <= t {
            if positive[order[next]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            next += 1;
        }
        ba.push(
            report(&ConfusionCounts {
                tp,
                fp,
                tn: neg - fp,
                fn_: pos - tp,
            })
            .ba,
        );
    }
    let best = ba.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let optimal: Vec<usize> = (0..ba.len()).filter(|&i| ba[i] == best).collect();
    let pick = optimal[(optimal.len() - 1) / 2];
    Some((candidates[pick], best))
}

/// Calibrates every concept of a raw score matrix against annotations.
/// Concepts without both a positive and a negative image are skipped.
pub fn calibrate_thresholds(
    train_scores: &ScoreMatrix,
    annotations: &ConceptAnnotations,
    description_style_tag: &str,
) -> Result<ThresholdTable> {
    if train_scores.is_normalized() {
        return Err(Error::InvalidInput("zero-shot calibration uses raw cosine scores".into()));
    }
    let rows = annotations.align(train_scores)?;
    let results: Vec<std::result::Result<ThresholdEntry, SkippedConcept>> = train_scores
        .concept_ids()
        .par_iter()
        .enumerate()
        .map(|(j, cid)| {
            let scores: Vec<f32> = rows.iter().map(|&(i, _)| train_scores.get(i, j)).collect();
            let positive: Vec<bool> = rows.iter().map(|(_, s)| s.contains(cid)).collect();
            match calibrate_concept(&scores, &positive) {
                Some((threshold, train_ba)) => Ok(ThresholdEntry {
                    concept_id: cid.clone(),
                    threshold,
                    train_ba,
                }),
                None => Err(SkippedConcept {
                    concept_id: cid.clone(),
                    reason: if positive.iter().any(|&p| p) {
                        "no negative training image".into()
                    } else {
                        "no positive training image".into()
                    },
                }),
            }
        })
        .collect();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(s) => {
                log::warn!("skipping concept `{}`: {}", s.concept_id, s.reason);
                skipped.push(s);
            }
        }
    }
    Ok(ThresholdTable {
        description_style_tag: description_style_tag.to_string(),
        entries,
        skipped,
    })
}

/// Concepts whose score is strictly above their threshold, in row order.
/// Concepts without a threshold are never detected.
pub fn detect(scores_row: &[f32], concept_ids: &[String], table: &ThresholdTable) -> Vec<String> {
    let thresholds: HashMap<&str, f64> =
        table.entries.iter().map(|e| (e.concept_id.as_str(), e.threshold)).collect();
    concept_ids
        .iter()
        .zip(scores_row)
        .filter(|(cid, &s)| thresholds.get(cid.as_str()).is_some_and(|&t| s as f64 > t))
        .map(|(cid, _)| cid.clone())
        .collect()
}

/// Detections for every image of a raw score matrix.
pub fn detect_all(scores: &ScoreMatrix, table: &ThresholdTable) -> ConceptAnnotations {
    let missing = scores
        .concept_ids()
        .iter()
        .filter(|c| table.get(c).is_none())
        .count();
    if missing > 0 {
        log::warn!("{missing} scored concepts have no threshold and are never detected");
    }
    ConceptAnnotations {
        images: scores
            .image_ids()
            .iter()
            .zip(scores.rows())
            .map(|(id, row)| AnnotatedImage {
                image_id: id.clone(),
                concepts: detect(row, scores.concept_ids(), table).into_iter().collect(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDetection {
    pub concept_id: String,
    pub counts: ConfusionCounts,
    pub ba: f64,
    pub precision: f64,
    pub recall: f64,
    /// Test images lack one of the two classes; left out of the aggregates.
    #[serde(default)]
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub description_style_tag: String,
    pub n_images: usize,
    pub per_concept: Vec<ConceptDetection>,
    pub mean_ba: f64,
    pub median_ba: f64,
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Midpoint median; 0 for an empty slice.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

pub fn evaluate_detection(
    test_scores: &ScoreMatrix,
    annotations: &ConceptAnnotations,
    table: &ThresholdTable,
) -> Result<DetectionReport> {
    if test_scores.is_normalized() {
        return Err(Error::InvalidInput("zero-shot evaluation uses raw cosine scores".into()));
    }
    let rows = annotations.align(test_scores)?;
    let mut per_concept = Vec::new();
    for (j, cid) in test_scores.concept_ids().iter().enumerate() {
        let Some(entry) = table.get(cid) else { continue };
        let scores: Vec<f32> = rows.iter().map(|&(i, _)| test_scores.get(i, j)).collect();
        let positive: Vec<bool> = rows.iter().map(|(_, s)| s.contains(cid)).collect();
        let counts = counts_for(&scores, &positive, entry.threshold);
        let r = report(&counts);
        per_concept.push(ConceptDetection {
            concept_id: cid.clone(),
            counts,
            ba: r.ba,
            precision: r.p_priv,
            recall: r.r_priv,
            excluded: counts.tp + counts.fn_ == 0 || counts.tn + counts.fp == 0,
        });
    }
    let bas: Vec<f64> = per_concept.iter().filter(|c| !c.excluded).map(|c| c.ba).collect();
    Ok(DetectionReport {
        description_style_tag: table.description_style_tag.clone(),
        n_images: rows.len(),
        mean_ba: mean(&bas),
        median_ba: median(&bas),
        per_concept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleDelta {
    pub concept_id: String,
    pub ba_a: f64,
    pub ba_b: f64,
    /// `ba_b - ba_a`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleComparison {
    pub style_a: String,
    pub style_b: String,
    pub per_concept: Vec<StyleDelta>,
    pub mean_delta: f64,
    pub median_delta: f64,
    pub median_abs_delta: f64,
}

/// Paired per-concept BA differences between two description styles, over
/// concepts evaluated (and not excluded) in both.
pub fn compare_styles(a: &DetectionReport, b: &DetectionReport) -> StyleComparison {
    let other: HashMap<&str, &ConceptDetection> = b
        .per_concept
        .iter()
        .filter(|c| !c.excluded)
        .map(|c| (c.concept_id.as_str(), c))
        .collect();
    let per_concept: Vec<StyleDelta> = a
        .per_concept
        .iter()
        .filter(|c| !c.excluded)
        .filter_map(|ca| {
            other.get(ca.concept_id.as_str()).map(|cb| StyleDelta {
                concept_id: ca.concept_id.clone(),
                ba_a: ca.ba,
                ba_b: cb.ba,
                delta: cb.ba - ca.ba,
            })
        })
        .collect();
    let deltas: Vec<f64> = per_concept.iter().map(|d| d.delta).collect();
    let abs: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
    StyleComparison {
        style_a: a.description_style_tag.clone(),
        style_b: b.description_style_tag.clone(),
        mean_delta: mean(&deltas),
        median_delta: median(&deltas),
        median_abs_delta: median(&abs),
        per_concept,
    }
}
