//! Config-driven pipeline with content-hash caching.
//!
//! Each stage's cache key is a SHA-256 over its parameters, the hashes of the
//! files it reads and the keys of the stages it depends on, so a key is known
//! before anything runs. Outputs live in `<cache_dir>/<stage>/<key>/` next to
//! a `record.json` listing their hashes, and are copied to `<out_dir>/<stage>/`.
//! A stage that is needed but not requested must already be cached.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::bias::{compare, scale_weights};
use crate::datasets::{align, load_binary_labels, LabelSchema, LabeledDataset, Split, SplitSpec};
use crate::embed::{
    embed_images, embed_texts, load_matrix, load_matrix_manifest, read_json, save_matrix, save_matrix_manifest,
    sidecar_path, write_json, EncoderHandle, ImageItem, MatrixManifest,
};
use crate::error::{Error, Result};
use crate::explain::{explain_all, render_report, ReportFormat, ThresholdBasis, DEFAULT_TAU};
use crate::hashing::{file_sha256, sha256_hex};
use crate::lrmodel::{load_model, predict_labels, predict_proba, save_model, train};
use crate::metrics::{confusion, EvaluationReport};
use crate::score::{apply_normalizer, cosine_scores, fit_normalizer, NormalizationScope, Normalizer, ScoreMatrix};
use crate::tune::{search, SearchResult, Strategy, DEFAULT_BUDGET};
use crate::vocab::{
    compile_prompts, load_vocabulary, read_prompts, select_bottleneck, write_prompts, SelectionMode, TemplateStyle,
};
use crate::zeroshot::{calibrate_thresholds, evaluate_detection, ConceptAnnotations};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vocab,
    Embed,
    Score,
    Normalize,
    Tune,
    Train,
    Evaluate,
    Explain,
    Zeroshot,
    Bias,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Vocab,
        Stage::Embed,
        Stage::Score,
        Stage::Normalize,
        Stage::Tune,
        Stage::Train,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Zeroshot,
        Stage::Bias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vocab => "vocab",
            Stage::Embed => "embed",
            Stage::Score => "score",
            Stage::Normalize => "normalize",
            Stage::Tune => "tune",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Zeroshot => "zeroshot",
            Stage::Bias => "bias",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_batch() -> usize {
    16
}

fn default_c() -> f64 {
    1.0
}

fn default_max_iter() -> u32 {
    100
}

fn default_budget() -> usize {
    DEFAULT_BUDGET
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_format() -> String {
    "json".into()
}

fn default_schema() -> String {
    "direct-binary".into()
}

fn default_template() -> TemplateStyle {
    TemplateStyle::Description
}

fn default_selection() -> SelectionMode {
    SelectionMode::HierarchyRule
}

fn default_test() -> Split {
    Split::Test
}

fn default_svg_rows() -> usize {
    40
}

/// `pipeline.toml`. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Stages to run; defaults to every configured stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<Stage>>,
    pub vocab: VocabConfig,
    pub embed: EmbedConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub normalize: NormalizeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune: Option<TuneConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeroshot: Option<ZeroShotConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub path: PathBuf,
    #[serde(default = "default_template")]
    pub template: TemplateStyle,
    #[serde(default = "default_selection")]
    pub selection: SelectionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    /// Precomputed image embeddings (PVX1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_embeddings: Option<PathBuf>,
    /// Precomputed concept-prompt embeddings (PVX1), one row per selected concept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_list: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_model: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub labels: PathBuf,
    /// `direct-binary` (CSV) or `vispr` (JSON Lines attributes).
    #[serde(default = "default_schema")]
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safe_attribute: Option<String>,
    pub split: PathBuf,
}

impl DataConfig {
    pub fn label_schema(&self) -> Result<LabelSchema> {
        let schema: LabelSchema = self.schema.parse()?;
        Ok(match (schema, &self.safe_attribute) {
            (LabelSchema::VisprSafeAttribute { .. }, Some(key)) => LabelSchema::vispr(key.clone()),
            (s, _) => s,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeConfig {
    #[serde(default)]
    pub scope: NormalizationScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub strategy: Strategy,
}

/// Fixed hyperparameters, used when no `[tune]` section is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "C", default = "default_c")]
    pub c: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c: default_c(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub basis: ThresholdBasis,
    /// `text`, `json` or `html`.
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_test")]
    pub split: Split,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            tau: DEFAULT_TAU,
            basis: ThresholdBasis::Raw,
            format: default_format(),
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    /// Models from other datasets to compare against the one trained here.
    #[serde(default)]
    pub models: Vec<PathBuf>,
    #[serde(default = "default_svg_rows")]
    pub svg_rows: usize,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok((cfg, base))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.embed;
        match (&e.image_embeddings, &e.image_model) {
            (Some(_), Some(_)) => return Err(Error::Config("give either image_embeddings or image_model".into())),
            (None, None) => return Err(Error::Config("embed needs image_embeddings or image_model".into())),
            (None, Some(_)) if e.image_list.is_none() => {
                return Err(Error::Config("image_model needs image_list".into()))
            }
            _ => {}
        }
        match (&e.text_embeddings, &e.text_model) {
            (Some(_), Some(_)) => return Err(Error::Config("give either text_embeddings or text_model".into())),
            (None, None) => return Err(Error::Config("embed needs text_embeddings or text_model".into())),
            _ => {}
        }
        if e.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.data.label_schema()?;
        self.explain.format.parse::<ReportFormat>()?;
        if let Some(t) = &self.tune {
            if t.budget == 0 {
                return Err(Error::Config("tune budget must be at least 1".into()));
            }
        }
        if let Some(stages) = &self.stages {
            for s in stages {
                if !self.configured(*s) {
                    return Err(Error::Config(format!("stage `{s}` is requested but not configured")));
                }
            }
        }
        Ok(())
    }

    fn configured(&self, stage: Stage) -> bool {
        match stage {
            Stage::Tune => self.tune.is_some(),
            Stage::Zeroshot => self.zeroshot.is_some(),
            Stage::Bias => self.bias.is_some(),
            _ => true,
        }
    }

    fn requested(&self) -> Vec<Stage> {
        match &self.stages {
            Some(s) => {
                let mut s = s.clone();
                s.sort();
                s.dedup();
                s
            }
            None => Stage::ALL.into_iter().filter(|s| self.configured(*s)).collect(),
        }
    }

    fn dependencies(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Vocab => vec![],
            Stage::Embed => vec![Stage::Vocab],
            Stage::Score => vec![Stage::Embed],
            Stage::Normalize => vec![Stage::Score],
            Stage::Tune => vec![Stage::Normalize],
            Stage::Train if self.tune.is_some() => vec![Stage::Normalize, Stage::Tune],
            Stage::Train => vec![Stage::Normalize],
            Stage::Evaluate => vec![Stage::Normalize, Stage::Train],
            Stage::Explain => vec![Stage::Score, Stage::Train],
            Stage::Zeroshot => vec![Stage::Score],
            Stage::Bias => vec![Stage::Train],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Executed,
    CacheHit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub status: StageStatus,
    pub requested: bool,
    pub outputs: BTreeMap<String, String>,
}

/// Written to `<out_dir>/run_manifest.json` after every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command_line: Vec<String>,
    pub config_path: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    stage: Stage,
    key: String,
    files: BTreeMap<String, String>,
}

/// Options from the command line that override the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub stages: Option<Vec<Stage>>,
    pub command_line: Vec<String>,
}

struct Runner {
    cfg: PipelineConfig,
    base: PathBuf,
    cache_dir: PathBuf,
    input_hashes: BTreeMap<String, String>,
    keys: HashMap<Stage, String>,
    dirs: HashMap<Stage, PathBuf>,
}

pub fn run_pipeline(config_path: &Path, opts: &RunOptions) -> Result<RunManifest> {
    let start = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (mut cfg, base) = PipelineConfig::load(config_path)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(stages) = &opts.stages {
        cfg.stages = Some(stages.clone());
        cfg.validate()?;
    }
    let cache_dir = match &opts.cache_dir {
        Some(c) => c.clone(),
        None => base.join(&cfg.cache_dir),
    };
    let out_dir = base.join(&cfg.out_dir);
    let mut runner = Runner {
        cfg,
        base,
        cache_dir,
        input_hashes: BTreeMap::new(),
        keys: HashMap::new(),
        dirs: HashMap::new(),
    };

    let requested = runner.cfg.requested();
    let mut needed: Vec<Stage> = Vec::new();
    let mut stack = requested.clone();
    while let Some(s) = stack.pop() {
        if !needed.contains(&s) {
            needed.push(s);
            stack.extend(runner.cfg.dependencies(s));
        }
    }
    needed.sort();

    for &s in &needed {
        let key = runner.stage_key(s).map_err(|e| stage_err(s, e))?;
        runner.keys.insert(s, key);
    }

    let mut records = Vec::new();
    for &stage in &needed {
        let key = runner.keys[&stage].clone();
        let dir = runner.cache_dir.join(stage.name()).join(&key);
        let is_requested = requested.contains(&stage);
        let (status, files) = if dir.join("record.json").exists() {
            (StageStatus::CacheHit, verify_cache(&dir)?)
        } else if is_requested {
            let files = runner.execute(stage, &dir).map_err(|e| stage_err(stage, e))?;
            (StageStatus::Executed, files)
        } else {
            let requester = requested
                .iter()
                .find(|r| runner.depends_on(**r, stage))
                .copied()
                .unwrap_or(stage);
            return Err(Error::StageInputMissing {
                stage: requester.name().into(),
                input: stage.name().into(),
            });
        };
        log::info!("{stage}: {:?} ({key})", status);
        runner.dirs.insert(stage, dir.clone());
        if is_requested {
            let dest = out_dir.join(stage.name());
            if dest.exists() {
                std::fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
            }
            std::fs::create_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
            for name in files.keys() {
                let (from, to) = (dir.join(name), dest.join(name));
                std::fs::copy(&from, &to).map_err(|e| Error::io(&to, e))?;
            }
        }
        records.push(StageRecord {
            stage,
            key,
            status,
            requested: is_requested,
            outputs: files,
        });
    }

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        command_line: opts.command_line.clone(),
        config_path: config_path.to_path_buf(),
        config_hash: file_sha256(config_path)?,
        seed: runner.cfg.seed,
        started_unix,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        inputs: runner.input_hashes,
        stages: records,
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_json(&out_dir.join("run_manifest.json"), &manifest)?;
    Ok(manifest)
}

fn stage_err(stage: Stage, e: Error) -> Error {
    match e {
        Error::Stage { .. } | Error::StageInputMissing { .. } | Error::CacheCorrupt { .. } => e,
        other => Error::Stage {
            stage: stage.name().into(),
            source: Box::new(other),
        },
    }
}

fn verify_cache(dir: &Path) -> Result<BTreeMap<String, String>> {
    let record_path = dir.join("record.json");
    let record: CacheRecord = read_json(&record_path).map_err(|_| Error::CacheCorrupt {
        path: record_path.clone(),
    })?;
    for (name, hash) in &record.files {
        let p = dir.join(name);
        match file_sha256(&p) {
            Ok(h) if &h == hash => {}
            _ => return Err(Error::CacheCorrupt { path: p }),
        }
    }
    Ok(record.files)
}

impl Runner {
    fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn depends_on(&self, stage: Stage, target: Stage) -> bool {
        self.cfg
            .dependencies(stage)
            .into_iter()
            .any(|d| d == target || self.depends_on(d, target))
    }

    fn hash_input(&mut self, p: &Path) -> Result<String> {
        let key = p.display().to_string();
        if let Some(h) = self.input_hashes.get(&key) {
            return Ok(h.clone());
        }
        let h = file_sha256(p)?;
        self.input_hashes.insert(key, h.clone());
        Ok(h)
    }

    /// A PVX1 file plus whichever sidecars exist.
    fn hash_matrix_input(&mut self, p: &Path) -> Result<Vec<String>> {
        let mut hashes = vec![self.hash_input(p)?];
        for suffix in [".ids.json", ".manifest.json"] {
            let side = sidecar_path(p, suffix);
            if side.exists() {
                hashes.push(self.hash_input(&side)?);
            }
        }
        Ok(hashes)
    }

    fn hash_encoder_input(&mut self, model: &Path) -> Result<Vec<String>> {
        let manifest_path = sidecar_path(model, ".manifest.json");
        let mut hashes = vec![self.hash_input(model)?, self.hash_input(&manifest_path)?];
        let manifest: crate::embed::EncoderManifest = read_json(&manifest_path)?;
        if let Some(t) = manifest.text {
            let dir = manifest_path.parent().unwrap_or(Path::new("."));
            hashes.push(self.hash_input(&dir.join(&t.vocab))?);
            hashes.push(self.hash_input(&dir.join(&t.merges))?);
        }
        Ok(hashes)
    }

    fn stage_key(&mut self, stage: Stage) -> Result<String> {
        let cfg = self.cfg.clone();
        let mut inputs: Vec<String> = Vec::new();
        let params = match stage {
            Stage::Vocab => {
                inputs.push(self.hash_input(&self.path(&cfg.vocab.path))?);
                serde_json::to_value(&cfg.vocab)?
            }
            Stage::Embed => {
                let e = &cfg.embed;
                if let Some(p) = &e.image_embeddings {
                    inputs.extend(self.hash_matrix_input(&self.path(p))?);
                }
                if let Some(p) = &e.text_embeddings {
                    inputs.extend(self.hash_matrix_input(&self.path(p))?);
                }
                if let Some(m) = &e.image_model {
                    inputs.extend(self.hash_encoder_input(&self.path(m))?);
                    let list = self.path(e.image_list.as_ref().expect("validated"));
                    inputs.push(self.hash_input(&list)?);
                    for item in ImageItem::read_list(&list)? {
                        if item.path.exists() {
                            inputs.push(self.hash_input(&item.path)?);
                        }
                    }
                }
                if let Some(m) = &e.text_model {
                    inputs.extend(self.hash_encoder_input(&self.path(m))?);
                }
                serde_json::json!({ "batch_size": e.batch_size })
            }
            Stage::Score => serde_json::Value::Null,
            Stage::Normalize => {
                inputs.push(self.hash_input(&self.path(&cfg.data.labels))?);
                inputs.push(self.hash_input(&self.path(&cfg.data.split))?);
                serde_json::json!({ "data": cfg.data, "normalize": cfg.normalize })
            }
            Stage::Tune => serde_json::json!({ "tune": cfg.tune, "seed": cfg.seed }),
            Stage::Train if cfg.tune.is_some() => serde_json::json!({ "seed": cfg.seed }),
            Stage::Train => serde_json::json!({ "train": cfg.train, "seed": cfg.seed }),
            Stage::Evaluate => serde_json::Value::Null,
            Stage::Explain => serde_json::to_value(&cfg.explain)?,
            Stage::Zeroshot => {
                let z = cfg.zeroshot.as_ref().expect("configured");
                inputs.push(self.hash_input(&self.path(&z.annotations))?);
                inputs.push(self.hash_input(&self.path(&cfg.data.split))?);
                serde_json::to_value(z)?
            }
            Stage::Bias => {
                let b = cfg.bias.as_ref().expect("configured");
                for m in &b.models {
                    inputs.push(self.hash_input(&self.path(m))?);
                }
                serde_json::to_value(b)?
            }
        };
        let upstream: Vec<(String, String)> = cfg
            .dependencies(stage)
            .into_iter()
            .map(|d| (d.name().to_string(), self.keys[&d].clone()))
            .collect();
        let material = serde_json::json!({
            "stage": stage.name(),
            "version": TOOL_VERSION,
            "params": params,
            "inputs": inputs,
            "upstream": upstream,
        });
        Ok(sha256_hex(serde_json::to_string(&material)?.as_bytes()))
    }

    fn upstream(&self, stage: Stage, file: &str) -> PathBuf {
        self.dirs[&stage].join(file)
    }

    fn execute(&self, stage: Stage, dir: &Path) -> Result<BTreeMap<String, String>> {
        let partial = dir.with_extension("partial");
        if partial.exists() {
            std::fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        }
        std::fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        match stage {
            Stage::Vocab => self.run_vocab(&partial),
            Stage::Embed => self.run_embed(&partial),
            Stage::Score => self.run_score(&partial),
            Stage::Normalize => self.run_normalize(&partial),
            Stage::Tune => self.run_tune(&partial),
            Stage::Train => self.run_train(&partial),
            Stage::Evaluate => self.run_evaluate(&partial),
            Stage::Explain => self.run_explain(&partial),
            Stage::Zeroshot => self.run_zeroshot(&partial),
            Stage::Bias => self.run_bias(&partial),
        }?;
        let mut files = BTreeMap::new();
        let entries = std::fs::read_dir(&partial).map_err(|e| Error::io(&partial, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&partial, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            files.insert(name, file_sha256(&entry.path())?);
        }
        write_json(
            &partial.join("record.json"),
            &CacheRecord {
                stage,
                key: self.keys[&stage].clone(),
                files: files.clone(),
            },
        )?;
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&partial, dir).map_err(|e| Error::io(dir, e))?;
        Ok(files)
    }

    fn vocab_meta(&self) -> Result<VocabMeta> {
        read_json(&self.upstream(Stage::Vocab, "vocab.json"))
    }

    fn labels(&self) -> Result<(LabeledDataset, SplitSpec)> {
        let d = &self.cfg.data;
        let labels = load_binary_labels(&self.path(&d.labels), &d.label_schema()?)?;
        let split = SplitSpec::load(&self.path(&d.split))?;
        let tag = if split.dataset_tag.is_empty() {
            labels.dataset_tag.clone()
        } else {
            split.dataset_tag.clone()
        };
        Ok((labels.with_tag(tag), split))
    }

    fn run_vocab(&self, out: &Path) -> Result<()> {
        let v = &self.cfg.vocab;
        let vocab = select_bottleneck(&load_vocabulary(&self.path(&v.path), v.template)?, v.selection)?;
        vocab.write_jsonl(&out.join("vocabulary.jsonl"))?;
        write_prompts(&out.join("prompts.jsonl"), &compile_prompts(&vocab))?;
        write_json(
            &out.join("vocab.json"),
            &VocabMeta {
                source_tag: vocab.source_tag().into(),
                template: vocab.template_style(),
                selection: v.selection,
                content_hash: vocab.content_hash().into(),
                n_concepts: vocab.len(),
            },
        )
    }

    fn run_embed(&self, out: &Path) -> Result<()> {
        let e = &self.cfg.embed;
        let meta = self.vocab_meta()?;
        let prompts = read_prompts(&self.upstream(Stage::Vocab, "prompts.jsonl"))?;
        let prompt_ids: Vec<String> = prompts.iter().map(|p| p.concept_id.clone()).collect();

        let images = match (&e.image_embeddings, &e.image_model) {
            (Some(p), _) => load_matrix(&self.path(p))?,
            (None, Some(m)) => {
                let handle = EncoderHandle::load(&self.path(m))?;
                let items = ImageItem::read_list(&self.path(e.image_list.as_ref().expect("validated")))?;
                let res = embed_images(&handle, &items, e.batch_size)?;
                write_json(&out.join("skipped.json"), &res.skipped)?;
                res.matrix
            }
            (None, None) => unreachable!("validated"),
        };
        let texts = match (&e.text_embeddings, &e.text_model) {
            (Some(p), _) => {
                let path = self.path(p);
                if let Some(m) = load_matrix_manifest(&path)? {
                    if let Some(h) = m.vocab_hash {
                        if h != meta.content_hash {
                            return Err(Error::VocabHashMismatch {
                                expected: meta.content_hash,
                                actual: h,
                            });
                        }
                    }
                }
                load_matrix(&path)?
            }
            (None, Some(m)) => embed_texts(&EncoderHandle::load(&self.path(m))?, &prompts, e.batch_size)?,
            (None, None) => unreachable!("validated"),
        };
        if texts.ids() != prompt_ids.as_slice() {
            return Err(Error::ConceptMismatch(
                "concept embedding rows do not follow the compiled vocabulary".into(),
            ));
        }
        save_matrix(&images, &out.join("images.pvx"))?;
        save_matrix_manifest(
            &out.join("images.pvx"),
            &MatrixManifest {
                kind: "image".into(),
                ..Default::default()
            },
        )?;
        save_matrix(&texts, &out.join("concepts.pvx"))?;
        save_matrix_manifest(
            &out.join("concepts.pvx"),
            &MatrixManifest {
                kind: "text".into(),
                vocab_hash: Some(meta.content_hash),
                checkpoint: None,
            },
        )
    }

    fn run_score(&self, out: &Path) -> Result<()> {
        let images = load_matrix(&self.upstream(Stage::Embed, "images.pvx"))?;
        let concepts_path = self.upstream(Stage::Embed, "concepts.pvx");
        let concepts = load_matrix(&concepts_path)?;
        let hash = load_matrix_manifest(&concepts_path)?.and_then(|m| m.vocab_hash);
        cosine_scores(&images, &concepts)?
            .with_vocab_hash(hash)
            .save(&out.join("scores.pvx"))
    }

    fn raw_scores(&self) -> Result<ScoreMatrix> {
        ScoreMatrix::load(&self.upstream(Stage::Score, "scores.pvx"))
    }

    fn norm_scores(&self) -> Result<ScoreMatrix> {
        ScoreMatrix::load(&self.upstream(Stage::Normalize, "scores_norm.pvx"))
    }

    fn run_normalize(&self, out: &Path) -> Result<()> {
        let raw = self.raw_scores()?;
        let (labels, split) = self.labels()?;
        let (train_scores, _) = split_rows(&raw, &labels, &split, Split::Train)?;
        let norm = fit_normalizer(&train_scores, self.cfg.normalize.scope)?;
        norm.save(&out.join("normalizer.json"))?;
        let all = align(&raw, &labels)?;
        write_json(
            &out.join("alignment.json"),
            &serde_json::json!({
                "aligned": all.labels.len(),
                "unmatched_scores": all.unmatched_scores,
                "unmatched_labels": all.unmatched_labels,
            }),
        )?;
        apply_normalizer(&norm, &raw)?.save(&out.join("scores_norm.pvx"))
    }

    fn run_tune(&self, out: &Path) -> Result<()> {
        let t = self.cfg.tune.as_ref().expect("configured");
        let scores = self.norm_scores()?;
        let (labels, split) = self.labels()?;
        let (ts, tl) = split_rows(&scores, &labels, &split, Split::Train)?;
        let (vs, vl) = split_rows(&scores, &labels, &split, Split::Val)?;
        search(&ts, &tl, &vs, &vl, t.budget, t.strategy, self.cfg.seed)?.save(&out.join("search.json"))
    }

    fn run_train(&self, out: &Path) -> Result<()> {
        let (c, max_iter) = if self.cfg.tune.is_some() {
            let s = SearchResult::load(&self.upstream(Stage::Tune, "search.json"))?;
            (s.best.c, s.best.max_iter)
        } else {
            (self.cfg.train.c, self.cfg.train.max_iter)
        };
        let scores = self.norm_scores()?;
        let norm = Normalizer::load(&self.upstream(Stage::Normalize, "normalizer.json"))?;
        let (labels, split) = self.labels()?;
        let (ts, tl) = split_rows(&scores, &labels, &split, Split::Train)?;
        save_model(&train(&ts, &tl, &norm, c, max_iter, self.cfg.seed)?, &out.join("model.json"))
    }

    fn model(&self) -> Result<crate::lrmodel::SparseLinearModel> {
        load_model(&self.upstream(Stage::Train, "model.json"), None)
    }

    fn run_evaluate(&self, out: &Path) -> Result<()> {
        let model = self.model()?;
        let scores = self.norm_scores()?;
        let (labels, split) = self.labels()?;
        let (s, l) = split_rows(&scores, &labels, &split, Split::Test)?;
        let pred = predict_labels(&predict_proba(&model, &s)?);
        write_json(
            &out.join("evaluation.json"),
            &EvaluationReport::from_counts(confusion(&pred, &l.labels)?),
        )
    }

    fn run_explain(&self, out: &Path) -> Result<()> {
        let x = &self.cfg.explain;
        let model = self.model()?;
        let raw = self.raw_scores()?;
        let (labels, split) = self.labels()?;
        let (s, l) = split_rows(&raw, &labels, &split, x.split)?;
        let explanations = explain_all(&model, &s, x.tau, x.basis)?;
        let format: ReportFormat = x.format.parse()?;
        let ext = match format {
            ReportFormat::Text => "txt",
            ReportFormat::Json => "json",
            ReportFormat::Html => "html",
        };
        let doc = render_report(&explanations, Some(&l), format)?;
        let path = out.join(format!("explanations.{ext}"));
        std::fs::write(&path, doc).map_err(|e| Error::io(&path, e))
    }

    fn run_zeroshot(&self, out: &Path) -> Result<()> {
        let z = self.cfg.zeroshot.as_ref().expect("configured");
        let raw = self.raw_scores()?;
        let annotations = ConceptAnnotations::load(&self.path(&z.annotations))?;
        let split = SplitSpec::load(&self.path(&self.cfg.data.split))?;
        let style = z
            .style_tag
            .clone()
            .unwrap_or_else(|| self.cfg.vocab.template.to_string());
        let train_ids = present(&raw, split.ids(Split::Train));
        let test_ids = present(&raw, split.ids(Split::Test));
        let table = calibrate_thresholds(&raw.select_ids(&train_ids)?, &annotations, &style)?;
        table.save(&out.join("thresholds.json"))?;
        write_json(
            &out.join("detection.json"),
            &evaluate_detection(&raw.select_ids(&test_ids)?, &annotations, &table)?,
        )
    }

    fn run_bias(&self, out: &Path) -> Result<()> {
        let b = self.cfg.bias.as_ref().expect("configured");
        let mut profiles = vec![scale_weights(&self.model()?)];
        for m in &b.models {
            profiles.push(scale_weights(&load_model(&self.path(m), None)?));
        }
        let cmp = compare(&profiles)?;
        write_json(&out.join("profiles.json"), &profiles)?;
        write_json(&out.join("bias.json"), &cmp)?;
        cmp.write_csv(&out.join("bias.csv"))?;
        cmp.write_svg(&out.join("bias.svg"), b.svg_rows)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabMeta {
    source_tag: String,
    template: TemplateStyle,
    selection: SelectionMode,
    content_hash: String,
    n_concepts: usize,
}

fn present(scores: &ScoreMatrix, ids: &[String]) -> Vec<String> {
    let have: std::collections::HashSet<&str> = scores.image_ids().iter().map(String::as_str).collect();
    ids.iter().filter(|id| have.contains(id.as_str())).cloned().collect()
}

/// Rows of one split that have both a score and a label, in score order.
pub fn split_rows(
    scores: &ScoreMatrix,
    labels: &LabeledDataset,
    split: &SplitSpec,
    which: Split,
) -> Result<(ScoreMatrix, LabeledDataset)> {
    let labelled: std::collections::HashSet<&str> = labels.image_ids.iter().map(String::as_str).collect();
    let ids: Vec<String> = split
        .ids(which)
        .iter()
        .filter(|id| labelled.contains(id.as_str()))
        .cloned()
        .collect();
    let subset = labels.subset(&ids, which)?;
    if subset.is_empty() {
        return Err(Error::InvalidInput(format!("{which:?} split has no labelled images")));
    }
    let a = align(scores, &subset)?;
    Ok((a.scores, a.labels))
}
