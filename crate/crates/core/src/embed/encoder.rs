use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;

use super::preprocess::ImagePreprocessing;
use super::tokenizer::{ClipTokenizer, TextPreprocessing};
use super::{check_unique, read_json, sidecar_path, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::vocab::PromptSentence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Contents of `<model>.manifest.json`, written by the exporter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderManifest {
    pub format_version: u32,
    pub modality: Modality,
    pub checkpoint: String,
    pub reported_dim: usize,
    pub input_name: String,
    #[serde(default)]
    pub output_name: Option<String>,
    #[serde(default)]
    pub image: Option<ImagePreprocessing>,
    #[serde(default)]
    pub text: Option<TextPreprocessing>,
}

/// An embedding, or the reason the image could not be decoded.
type ImageOutcome = std::result::Result<Vec<f32>, String>;

enum Preprocessor {
    Image(ImagePreprocessing),
    Text {
        tokenizer: Box<ClipTokenizer>,
        spec: TextPreprocessing,
    },
}

/// A frozen encoder graph plus its preprocessing constants.
///
/// The graph is optimized for a batch of one; batches are split into rows and
/// encoded concurrently, so the batch size never changes the output bits.
pub struct EncoderHandle {
    model_path: PathBuf,
    manifest: EncoderManifest,
    plan: Arc<TypedRunnableModel>,
    preprocessor: Preprocessor,
}

impl std::fmt::Debug for EncoderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderHandle")
            .field("model_path", &self.model_path)
            .field("manifest", &self.manifest)
            .finish()
    }
}

fn tract_err(e: impl std::fmt::Display) -> Error {
    Error::Encoder(format!("{e:#}"))
}

impl EncoderHandle {
    /// Loads `path` and its sidecar `<path>.manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = sidecar_path(path, ".manifest.json");
        let manifest: EncoderManifest = read_json(&manifest_path)?;
        if manifest.format_version != 1 {
            return Err(Error::VersionMismatch {
                expected: 1,
                found: manifest.format_version,
            });
        }
        if manifest.reported_dim == 0 {
            return Err(Error::Encoder("reported_dim must be positive".into()));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));

        let mut model = tract_onnx::onnx().model_for_path(path).map_err(tract_err)?;
        let (preprocessor, facts) = match manifest.modality {
            Modality::Image => {
                let spec = manifest
                    .image
                    .clone()
                    .ok_or_else(|| Error::Encoder("image manifest lacks `image` constants".into()))?;
                let c = spec.crop_size as usize;
                let facts = vec![(
                    manifest.input_name.clone(),
                    InferenceFact::dt_shape(f32::datum_type(), tvec!(1, 3, c, c)),
                )];
                (Preprocessor::Image(spec), facts)
            }
            Modality::Text => {
                let spec = manifest
                    .text
                    .clone()
                    .ok_or_else(|| Error::Encoder("text manifest lacks `text` tokenizer spec".into()))?;
                let tokenizer = ClipTokenizer::from_files(&base.join(&spec.vocab), &base.join(&spec.merges))?;
                let shape = tvec!(1, spec.context_length);
                let mut facts = vec![(
                    manifest.input_name.clone(),
                    InferenceFact::dt_shape(i64::datum_type(), shape.clone()),
                )];
                if let Some(mask) = &spec.attention_mask_input {
                    facts.push((mask.clone(), InferenceFact::dt_shape(i64::datum_type(), shape)));
                }
                (Preprocessor::Text { tokenizer: Box::new(tokenizer), spec }, facts)
            }
        };
        let names: Vec<&str> = facts.iter().map(|(n, _)| n.as_str()).collect();
        model.set_input_names(&names).map_err(tract_err)?;
        for (ix, (_, fact)) in facts.into_iter().enumerate() {
            model.set_input_fact(ix, fact).map_err(tract_err)?;
        }
        if let Some(out) = &manifest.output_name {
            model.select_outputs_by_name([out.as_str()]).map_err(tract_err)?;
        }
        let plan = model
            .into_optimized()
            .map_err(tract_err)?
            .into_runnable()
            .map_err(tract_err)?;
        Ok(EncoderHandle {
            model_path: path.to_path_buf(),
            manifest,
            plan,
            preprocessor,
        })
    }

    pub fn modality(&self) -> Modality {
        self.manifest.modality
    }

    pub fn reported_dim(&self) -> usize {
        self.manifest.reported_dim
    }

    pub fn manifest(&self) -> &EncoderManifest {
        &self.manifest
    }

    pub fn model_path(&self) -> &Path {
        &self.model_path
    }

    fn run(&self, inputs: TVec<TValue>) -> Result<Vec<f32>> {
        let out = self.plan.run(inputs).map_err(tract_err)?;
        let view = out[0].to_plain_array_view::<f32>().map_err(tract_err)?;
        let row: Vec<f32> = view.iter().copied().collect();
        if row.len() != self.manifest.reported_dim {
            return Err(Error::DimensionMismatch {
                expected: self.manifest.reported_dim,
                actual: row.len(),
            });
        }
        Ok(row)
    }

    fn encode_image(&self, img: &image::DynamicImage) -> Result<Vec<f32>> {
        let Preprocessor::Image(spec) = &self.preprocessor else {
            return Err(Error::Encoder("not an image encoder".into()));
        };
        let c = spec.crop_size as usize;
        let pixels = spec.apply(img);
        let tensor = Tensor::from_shape(&[1, 3, c, c], &pixels).map_err(tract_err)?;
        self.run(tvec!(tensor.into_tvalue()))
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        let Preprocessor::Text { tokenizer, spec } = &self.preprocessor else {
            return Err(Error::Encoder("not a text encoder".into()));
        };
        let (ids, mask) = tokenizer.encode_padded(text, spec.context_length, spec.pad_token_id)?;
        let shape = [1, spec.context_length];
        let mut inputs: TVec<TValue> = tvec!(Tensor::from_shape(&shape, &ids).map_err(tract_err)?.into_tvalue());
        if spec.attention_mask_input.is_some() {
            inputs.push(Tensor::from_shape(&shape, &mask).map_err(tract_err)?.into_tvalue());
        }
        self.run(inputs)
    }
}

/// An image to embed, keyed by the id its row will carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageItem {
    pub id: String,
    pub path: PathBuf,
}

impl ImageItem {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        ImageItem {
            id: id.into(),
            path: path.into(),
        }
    }

    /// Reads a list file: one `id<TAB>path` or bare `path` per line (id = file stem).
    /// Relative paths are resolved against the list file's directory.
    pub fn read_list(list: &Path) -> Result<Vec<ImageItem>> {
        let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
        let base = list.parent().unwrap_or(Path::new("."));
        let mut items = Vec::new();
        for line in text.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()) {
            let (id, path) = match line.split_once('\t') {
                Some((id, p)) => (id.to_string(), PathBuf::from(p)),
                None => {
                    let p = PathBuf::from(line);
                    let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (id, p)
                }
            };
            let path = if path.is_relative() { base.join(path) } else { path };
            items.push(ImageItem { id, path });
        }
        Ok(items)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct EmbedOutput {
    pub matrix: EmbeddingMatrix,
    /// Inputs that could not be decoded; their rows are omitted.
    pub skipped: Vec<SkippedItem>,
}

/// Embeds images in input order. Undecodable images are skipped and reported;
/// a dimension mismatch is fatal.
pub fn embed_images(handle: &EncoderHandle, items: &[ImageItem], batch_size: usize) -> Result<EmbedOutput> {
    if handle.modality() != Modality::Image {
        return Err(Error::Encoder(format!("{} is not an image encoder", handle.model_path.display())));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    check_unique(&ids)?;

    let batches: Vec<Vec<Result<ImageOutcome>>> = items
        .par_chunks(batch_size)
        .map(|batch| {
            batch
                .par_iter()
                .map(|item| match image::open(&item.path) {
                    Ok(img) => handle.encode_image(&img).map(Ok),
                    Err(e) => Ok(Err(e.to_string())),
                })
                .collect()
        })
        .collect();

    let dim = handle.reported_dim();
    let mut out_ids = Vec::new();
    let mut data = Vec::new();
    let mut skipped = Vec::new();
    for (item, res) in items.iter().zip(batches.into_iter().flatten()) {
        match res? {
            Ok(row) => {
                out_ids.push(item.id.clone());
                data.extend(row);
            }
            Err(reason) => {
                log::warn!("skipping {}: {reason}", item.path.display());
                skipped.push(SkippedItem {
                    id: item.id.clone(),
                    path: item.path.clone(),
                    reason,
                });
            }
        }
    }
    Ok(EmbedOutput {
        matrix: EmbeddingMatrix::new(out_ids, dim, data)?,
        skipped,
    })
}

/// Embeds prompt sentences; row ids are the concept ids.
pub fn embed_texts(handle: &EncoderHandle, prompts: &[PromptSentence], batch_size: usize) -> Result<EmbeddingMatrix> {
    if handle.modality() != Modality::Text {
        return Err(Error::Encoder(format!("{} is not a text encoder", handle.model_path.display())));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let ids: Vec<String> = prompts.iter().map(|p| p.concept_id.clone()).collect();
    check_unique(&ids)?;
    let rows: Vec<Result<Vec<f32>>> = prompts
        .par_chunks(batch_size)
        .flat_map_iter(|batch| batch.iter().map(|p| handle.encode_text(&p.text)).collect::<Vec<_>>())
        .collect();
    let mut data = Vec::with_capacity(prompts.len() * handle.reported_dim());
    for r in rows {
        data.extend(r?);
    }
    EmbeddingMatrix::new(ids, handle.reported_dim(), data)
}
