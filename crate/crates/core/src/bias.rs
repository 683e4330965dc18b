//! Cross-dataset weight comparison: each model's weights are divided by their
//! largest magnitude, then concepts are lined up across datasets.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrmodel::SparseLinearModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub dataset_tag: String,
    pub concept_ids: Vec<String>,
    pub scaled: Vec<f64>,
    #[serde(default)]
    pub vocab_hash: Option<String>,
}

/// `w / max|w|`; an all-zero vector stays zero.
pub fn scale_vector(weights: &[f64]) -> Vec<f64> {
    let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 {
        return vec![0.0; weights.len()];
    }
    weights.iter().map(|w| w / max).collect()
}

pub fn scale_weights(model: &SparseLinearModel) -> BiasProfile {
    BiasProfile {
        dataset_tag: model.training_meta.dataset_tag.clone(),
        concept_ids: model.concept_ids.clone(),
        scaled: scale_vector(&model.weights),
        vocab_hash: model.vocab_hash.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agreement {
    BothPrivate,
    BothPublic,
    Conflicting,
    ZeroSomewhere,
}

impl Agreement {
    pub fn of(values: &[f64]) -> Self {
        if values.contains(&0.0) {
            Agreement::ZeroSomewhere
        } else if values.iter().all(|&v| v > 0.0) {
            Agreement::BothPrivate
        } else if values.iter().all(|&v| v < 0.0) {
            Agreement::BothPublic
        } else {
            Agreement::Conflicting
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Agreement::BothPrivate => "both-private",
            Agreement::BothPublic => "both-public",
            Agreement::Conflicting => "conflicting",
            Agreement::ZeroSomewhere => "zero-somewhere",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub concept_id: String,
    /// One scaled weight per profile, in profile order.
    pub scaled: Vec<f64>,
    pub agreement: Agreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasComparison {
    pub datasets: Vec<String>,
    /// Sorted by largest magnitude across datasets, then vocabulary order.
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(profiles: &[BiasProfile]) -> Result<BiasComparison> {
    let Some(first) = profiles.first() else {
        return Err(Error::InvalidInput("no profiles to compare".into()));
    };
    for p in &profiles[1..] {
        if let (Some(a), Some(b)) = (&first.vocab_hash, &p.vocab_hash) {
            if a != b {
                return Err(Error::VocabHashMismatch {
                    expected: a.clone(),
                    actual: b.clone(),
                });
            }
        }
        if p.concept_ids != first.concept_ids {
            return Err(Error::ConceptMismatch(format!(
                "`{}` and `{}` use different concept lists",
                first.dataset_tag, p.dataset_tag
            )));
        }
    }
    let mut rows: Vec<(usize, ComparisonRow)> = first
        .concept_ids
        .iter()
        .enumerate()
        .map(|(j, cid)| {
            let scaled: Vec<f64> = profiles.iter().map(|p| p.scaled[j]).collect();
            (
                j,
                ComparisonRow {
                    concept_id: cid.clone(),
                    agreement: Agreement::of(&scaled),
                    scaled,
                },
            )
        })
        .collect();
    let peak = |r: &ComparisonRow| r.scaled.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    rows.sort_by(|(ja, a), (jb, b)| peak(b).total_cmp(&peak(a)).then(ja.cmp(jb)));
    Ok(BiasComparison {
        datasets: profiles.iter().map(|p| p.dataset_tag.clone()).collect(),
        rows: rows.into_iter().map(|(_, r)| r).collect(),
    })
}

impl BiasComparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["concept_id".to_string()];
        header.extend(self.datasets.iter().cloned());
        header.push("agreement".into());
        w.write_record(&header).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for r in &self.rows {
            let mut rec = vec![r.concept_id.clone()];
            rec.extend(r.scaled.iter().map(|v| v.to_string()));
            rec.push(r.agreement.as_str().into());
            w.write_record(&rec).map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Grouped horizontal bars, one group per concept with a nonzero weight
    /// somewhere, limited to the first `max_rows`.
    pub fn to_svg(&self, max_rows: usize) -> String {
        const PALETTE: [&str; 6] = ["#e07000", "#1f5fbf", "#2a9d4b", "#8b5a2b", "#7b3fa0", "#555555"];
        let rows: Vec<&ComparisonRow> = self
            .rows
            .iter()
            .filter(|r| r.scaled.iter().any(|&v| v != 0.0))
            .take(max_rows)
            .collect();
        let n = self.datasets.len().max(1);
        let (label_w, half, bar_h, gap, top) = (220.0, 200.0, 10.0, 8.0, 40.0);
        let group_h = bar_h * n as f64 + gap;
        let width = label_w + 2.0 * half + 20.0;
        let height = top + group_h * rows.len() as f64 + 20.0;
        let axis = label_w + half;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">"
        );
        for (d, tag) in self.datasets.iter().enumerate() {
            let x = label_w + d as f64 * 120.0;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"10\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"19\">{}</text>",
                PALETTE[d % PALETTE.len()],
                x + 14.0,
                xml_escape(tag)
            );
        }
        let _ = writeln!(
            s,
            "<line x1=\"{axis}\" y1=\"{}\" x2=\"{axis}\" y2=\"{}\" stroke=\"#000\"/>",
            top - 4.0,
            height - 16.0
        );
        for (i, r) in rows.iter().enumerate() {
            let y0 = top + i as f64 * group_h;
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                label_w - 6.0,
                y0 + bar_h * n as f64 / 2.0 + 4.0,
                xml_escape(&r.concept_id)
            );
            for (d, &v) in r.scaled.iter().enumerate() {
                let w = v.abs() * half;
                let x = if v < 0.0 { axis - w } else { axis };
                let _ = writeln!(
                    s,
                    "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{w:.2}\" height=\"{bar_h}\" fill=\"{}\"/>",
                    y0 + d as f64 * bar_h,
                    PALETTE[d % PALETTE.len()]
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_svg(&self, path: &Path, max_rows: usize) -> Result<()> {
        std::fs::write(path, self.to_svg(max_rows)).map_err(|e| Error::io(path, e))
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(tag: &str, scaled: &[f64]) -> BiasProfile {
        BiasProfile {
            dataset_tag: tag.into(),
            concept_ids: (0..scaled.len()).map(|j| format!("c{j}")).collect(),
            scaled: scaled.to_vec(),
            vocab_hash: Some("h".into()),
        }
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scale_vector(&[2.0, -4.0, 1.0]), vec![0.5, -1.0, 0.25]);
        assert_eq!(scale_vector(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn agreement_classes() {
        assert_eq!(Agreement::of(&[0.3, 0.9]), Agreement::BothPrivate);
        assert_eq!(Agreement::of(&[-0.3, -0.9]), Agreement::BothPublic);
        assert_eq!(Agreement::of(&[0.8, -0.6]), Agreement::Conflicting);
        assert_eq!(Agreement::of(&[0.0, 0.5]), Agreement::ZeroSomewhere);
    }

    #[test]
    fn comparison_sorted_and_symmetric() {
        let a = profile("pa", &[0.1, -1.0, 0.0, 0.5]);
        let b = profile("vispr", &[1.0, 0.2, -0.3, 0.5]);
        let ab = compare(&[a.clone(), b.clone()]).unwrap();
        let ba = compare(&[b, a]).unwrap();
        let order: Vec<&str> = ab.rows.iter().map(|r| r.concept_id.as_str()).collect();
        assert_eq!(order, vec!["c0", "c1", "c3", "c2"]);
        for (x, y) in ab.rows.iter().zip(&ba.rows) {
            assert_eq!(x.concept_id, y.concept_id);
            assert_eq!(x.agreement, y.agreement);
            assert_eq!(x.scaled, vec![y.scaled[1], y.scaled[0]]);
        }
        let csv = ab.to_csv().unwrap();
        assert!(csv.starts_with("concept_id,pa,vispr,agreement\nc0,0.1,1,both-private\n"));
        let svg = ab.to_svg(10);
        assert_eq!(svg.matches("<rect").count(), 2 + 2 * 4);
    }

    #[test]
    fn mismatched_vocabularies() {
        let a = profile("a", &[1.0]);
        let mut b = profile("b", &[1.0]);
        b.vocab_hash = Some("other".into());
        assert!(matches!(compare(&[a.clone(), b]), Err(Error::VocabHashMismatch { .. })));
        assert!(compare(&[a, profile("c", &[1.0, 0.5])]).is_err());
        assert!(compare(&[]).is_err());
    }

    proptest! {
        #[test]
        fn scaling_preserves_sign_and_argmax(w in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
            let s = scale_vector(&w);
            let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in w.iter().zip(&s) {
                prop_assert_eq!(a.signum() * (*a != 0.0) as i32 as f64, b.signum() * (*b != 0.0) as i32 as f64);
                prop_assert!(b.abs() <= 1.0);
            }
            if max > 0.0 {
                let arg = w.iter().position(|v| v.abs() == max).unwrap();
                prop_assert_eq!(s[arg].abs(), 1.0);
            }
        }
    }
}
