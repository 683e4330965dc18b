//! Image and text embeddings.
//!
//! Embeddings are stored as raw encoder outputs (no L2 normalization) in the
//! `PVX1` container: the magic bytes `PVX1`, a little-endian `u16` version
//! (1), a `u8` dtype code (1 = `f32`), little-endian `u32` row count and
//! `u32` dim, then the row-major little-endian payload. Row ids live in a
//! sidecar `<file>.ids.json` holding a JSON array of strings.

mod container;
mod encoder;
mod preprocess;
pub mod tokenizer;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

pub use container::{read_container, write_container, DTYPE_F32, MAGIC, VERSION};
pub use encoder::{embed_images, embed_texts, EmbedOutput, EncoderHandle, EncoderManifest, ImageItem, Modality, SkippedItem};
pub use preprocess::{ImagePreprocessing, Resample};
pub use tokenizer::{ClipTokenizer, TextPreprocessing};

/// Rows of `dim`-dimensional `f32` embeddings keyed by unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidInput(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        check_unique(&ids)?;
        for (id, row) in ids.iter().zip(data.chunks_exact(dim)) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { id: id.clone() });
            }
        }
        Ok(EmbeddingMatrix { ids, dim, data })
    }

    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f32>>, dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "row `{id}` has {} values, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(ids, dim, data)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Vec::new(), dim, Vec::new())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Digest over ids, dim and the exact payload bits.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::with_capacity(self.data.len() * 4 + 64);
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(id.as_bytes());
            buf.push(0);
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&buf)
    }
}

pub(crate) fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

/// `<path><suffix>`, e.g. `scores.pvx` → `scores.pvx.ids.json`.
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Optional sidecar manifest attached to embedding files, e.g. the
/// vocabulary hash of a concept-embedding matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

pub fn save_matrix(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    write_container(path, matrix.len(), matrix.dim, &matrix.data)?;
    write_json(&sidecar_path(path, ".ids.json"), &matrix.ids)
}

pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let (rows, dim, data) = read_container(path)?;
    let ids: Vec<String> = read_json(&sidecar_path(path, ".ids.json"))?;
    if ids.len() != rows {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("{} ids in sidecar but {rows} rows in payload", ids.len()),
        });
    }
    if dim == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "dim is zero".into(),
        });
    }
    EmbeddingMatrix::new(ids, dim, data)
}

pub fn save_matrix_manifest(path: &Path, manifest: &MatrixManifest) -> Result<()> {
    write_json(&sidecar_path(path, ".manifest.json"), manifest)
}

/// Reads `<path>.manifest.json` if present.
pub fn load_matrix_manifest(path: &Path) -> Result<Option<MatrixManifest>> {
    let p = sidecar_path(path, ".manifest.json");
    if p.exists() {
        read_json(&p).map(Some)
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(EmbeddingMatrix::new(vec!["a".into()], 2, vec![1.0]).is_err());
        assert!(matches!(
            EmbeddingMatrix::new(vec!["a".into(), "a".into()], 1, vec![1.0, 2.0]),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            EmbeddingMatrix::new(vec!["a".into()], 1, vec![f32::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn save_load_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pvx");
        let data: Vec<f32> = (0..12).map(|i| (i as f32).sin() * 1e-3 + 0.1).collect();
        let m = EmbeddingMatrix::new(vec!["a".into(), "b".into(), "c".into()], 4, data).unwrap();
        save_matrix(&m, &path).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
    }

    #[test]
    fn empty_matrix_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pvx");
        let m = EmbeddingMatrix::empty(8).unwrap();
        save_matrix(&m, &path).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn id_row_disagreement() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pvx");
        let m = EmbeddingMatrix::new(vec!["a".into()], 2, vec![1.0, 2.0]).unwrap();
        save_matrix(&m, &path).unwrap();
        write_json(&sidecar_path(&path, ".ids.json"), &["a", "b"]).unwrap();
        assert!(matches!(load_matrix(&path), Err(Error::Format { .. })));
    }
}
