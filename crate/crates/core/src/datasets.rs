//! Binary privacy labels, dataset splits and score/label alignment.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{read_json, write_json};
use crate::error::{Error, Result};
use crate::score::ScoreMatrix;

pub const PRIVATE: u8 = 1;
pub const PUBLIC: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

/// Image ids with binary labels (1 = private, 0 = public).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub image_ids: Vec<String>,
    pub labels: Vec<u8>,
    #[serde(default)]
    pub split_tag: Split,
    #[serde(default)]
    pub dataset_tag: String,
}

impl LabeledDataset {
    pub fn new(image_ids: Vec<String>, labels: Vec<u8>, split_tag: Split) -> Result<Self> {
        if image_ids.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} ids for {} labels",
                image_ids.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidInput(format!("label {bad} outside {{0, 1}}")));
        }
        crate::embed::check_unique(&image_ids)?;
        Ok(LabeledDataset {
            image_ids,
            labels,
            split_tag,
            dataset_tag: String::new(),
        })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.dataset_tag = tag.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_of(&self, id: &str) -> Option<u8> {
        self.image_ids.iter().position(|i| i == id).map(|i| self.labels[i])
    }

    /// The records whose ids appear in `ids`, in `ids` order.
    pub fn subset(&self, ids: &[String], split: Split) -> Result<LabeledDataset> {
        let index: HashMap<&str, u8> = self
            .image_ids
            .iter()
            .map(String::as_str)
            .zip(self.labels.iter().copied())
            .collect();
        let labels = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::IdMismatch(format!("split lists `{id}`, which has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset::new(ids.to_vec(), labels, split)?.with_tag(self.dataset_tag.clone()))
    }
}

/// Layout of a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LabelSchema {
    /// CSV with header `image_id,label`.
    DirectBinary,
    /// JSON Lines `{image_id, attributes:[...]}`: public iff `safe_attribute` is present.
    VisprSafeAttribute { safe_attribute: String },
}

impl LabelSchema {
    pub fn vispr(safe_attribute: impl Into<String>) -> Self {
        LabelSchema::VisprSafeAttribute {
            safe_attribute: safe_attribute.into(),
        }
    }
}

impl FromStr for LabelSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" | "direct-binary" | "csv" => Ok(LabelSchema::DirectBinary),
            "vispr" | "vispr-safe-attribute" => Ok(LabelSchema::vispr("safe")),
            other => Err(Error::InvalidInput(format!("unknown label schema `{other}`"))),
        }
    }
}

#[derive(Deserialize)]
struct CsvRecord {
    image_id: String,
    label: String,
}

#[derive(Deserialize)]
struct AttributeRecord {
    image_id: String,
    attributes: Vec<String>,
}

pub fn load_binary_labels(path: &Path, schema: &LabelSchema) -> Result<LabeledDataset> {
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (ids, labels) = match schema {
        LabelSchema::DirectBinary => read_csv_labels(path)?,
        LabelSchema::VisprSafeAttribute { safe_attribute } => read_attribute_labels(path, safe_attribute)?,
    };
    let mut seen = HashSet::new();
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(LabeledDataset::new(ids, labels, Split::Train)?.with_tag(tag))
}

fn read_csv_labels(path: &Path) -> Result<(Vec<String>, Vec<u8>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.deserialize::<CsvRecord>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let label = match rec.label.trim() {
            "0" => PUBLIC,
            "1" => PRIVATE,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("label `{other}` outside {{0, 1}}"),
                })
            }
        };
        ids.push(rec.image_id);
        labels.push(label);
    }
    Ok((ids, labels))
}

fn read_attribute_labels(path: &Path, safe: &str) -> Result<(Vec<String>, Vec<u8>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttributeRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let label = if rec.attributes.iter().any(|a| a == safe) {
            PUBLIC
        } else {
            PRIVATE
        };
        ids.push(rec.image_id);
        labels.push(label);
    }
    Ok((ids, labels))
}

pub fn write_csv_labels(path: &Path, data: &LabeledDataset) -> Result<()> {
    let mut out = String::from("image_id,label\n");
    for (id, l) in data.image_ids.iter().zip(&data.labels) {
        out.push_str(&format!("{id},{l}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Train/val/test image ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(default)]
    pub dataset_tag: String,
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::InvalidInput("train and test splits must be non-empty".into()));
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                if let Some(prev) = owner.insert(id.as_str(), name) {
                    return Err(Error::InvalidInput(format!("`{id}` appears in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: SplitSpec = read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Scores and labels joined on image id, in score-matrix order.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub scores: ScoreMatrix,
    pub labels: LabeledDataset,
    /// Score rows without a label.
    pub unmatched_scores: Vec<String>,
    /// Labels without a score row.
    pub unmatched_labels: Vec<String>,
}

/// Inner join on image id, preserving the score-matrix row order.
pub fn align(scores: &ScoreMatrix, labels: &LabeledDataset) -> Result<Alignment> {
    let index: HashMap<&str, u8> = labels
        .image_ids
        .iter()
        .map(String::as_str)
        .zip(labels.labels.iter().copied())
        .collect();
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut unmatched_scores = Vec::new();
    for (i, id) in scores.image_ids().iter().enumerate() {
        match index.get(id.as_str()) {
            Some(&l) => {
                rows.push(i);
                ids.push(id.clone());
                y.push(l);
            }
            None => unmatched_scores.push(id.clone()),
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let scored: HashSet<&str> = scores.image_ids().iter().map(String::as_str).collect();
    let unmatched_labels = labels
        .image_ids
        .iter()
        .filter(|id| !scored.contains(id.as_str()))
        .cloned()
        .collect();
    Ok(Alignment {
        scores: scores.select_rows(&rows),
        labels: LabeledDataset::new(ids, y, labels.split_tag)?.with_tag(labels.dataset_tag.clone()),
        unmatched_scores,
        unmatched_labels,
    })
}
