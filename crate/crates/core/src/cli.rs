//! The `privlex` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bias::{compare, scale_weights};
use crate::datasets::{load_binary_labels, LabelSchema, LabeledDataset, Split, SplitSpec};
use crate::embed::{
    embed_images, embed_texts, load_matrix, load_matrix_manifest, save_matrix, save_matrix_manifest, write_json,
    EncoderHandle, ImageItem, MatrixManifest,
};
use crate::error::{Error, Result};
use crate::explain::{explain_all, render_report, ReportFormat, ThresholdBasis, DEFAULT_TAU};
use crate::lrmodel::{load_model, predict_labels, predict_proba, save_model, train, SparseLinearModel};
use crate::metrics::{confusion, EvaluationReport};
use crate::pipeline::{run_pipeline, split_rows, RunOptions, Stage};
use crate::score::{apply_normalizer, cosine_scores, fit_normalizer, NormalizationScope, Normalizer, ScoreMatrix};
use crate::synth::{generate, write_fixture, PlantedConfig};
use crate::tune::{search, Strategy, DEFAULT_BUDGET};
use crate::vocab::{compile_prompts, load_vocabulary, read_prompts, select_bottleneck, write_prompts, SelectionMode, TemplateStyle};
use crate::zeroshot::{calibrate_thresholds, compare_styles, detect_all, evaluate_detection, ConceptAnnotations, DetectionReport, ThresholdTable};

#[derive(Debug, Parser)]
#[command(name = "privlex", version, about = "Concept-bottleneck image privacy classification")]
pub struct Cli {
    /// Top-level random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Cache directory for `run`.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Concept vocabularies.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Encode images or prompt sentences with an ONNX encoder.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Cosine concept scores from image and concept embeddings.
    Score {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        concepts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a min-max normalizer on training scores and apply it.
    Normalize {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        apply: Option<PathBuf>,
        #[arg(long)]
        norm_out: PathBuf,
        /// Normalized scores for `--apply`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "per-concept")]
        scope: NormalizationScope,
    },
    /// Fit the sparse logistic-regression classifier.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "C", default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: u32,
        /// Normalizer for already-normalized scores; raw scores get one fitted here.
        #[arg(long)]
        normalizer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hyperparameter search over C and max_iter.
    Tune {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long, default_value = "random")]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification report on a labelled split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Split to evaluate when `--split` is given.
        #[arg(long, default_value = "test")]
        which: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image explanations.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// Raw score matrix.
        #[arg(long, conflicts_with_all = ["images", "concepts"])]
        scores: Option<PathBuf>,
        /// Image embeddings, scored against `--concepts`.
        #[arg(long, requires = "concepts")]
        images: Option<PathBuf>,
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value = "raw")]
        basis: ThresholdBasis,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// Labels to show next to each image.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "direct-binary")]
        schema: LabelSchema,
        /// Report file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot concept detection.
    #[command(subcommand)]
    Zeroshot(ZeroshotCmd),
    /// Compare scaled classifier weights across datasets.
    Bias {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        /// Comparison CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        svg_rows: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a pipeline config with content-hash caching.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated stages overriding the config.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
    },
    /// Write a synthetic planted-concept fixture with a ready pipeline config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        n_images: usize,
        #[arg(long, default_value_t = 131)]
        n_concepts: usize,
        #[arg(long, default_value_t = 3)]
        n_planted: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        /// Tuning budget written into the generated config.
        #[arg(long, default_value_t = 25)]
        budget: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum VocabCmd {
    /// Select the bottleneck concepts and write one prompt sentence per concept.
    Compile {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "description")]
        template: TemplateStyle,
        #[arg(long, default_value = "hierarchy")]
        mode: SelectionMode,
        #[arg(long)]
        out: PathBuf,
        /// Also write the selected vocabulary as JSON Lines.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EmbedCmd {
    /// Encode an image list (`id<TAB>path` or bare paths per line).
    Images {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Encode compiled prompt sentences.
    Texts {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Vocabulary hash recorded in the matrix manifest.
        #[arg(long)]
        vocab_hash: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ZeroshotCmd {
    /// Per-concept thresholds maximizing balanced accuracy on annotated images.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "description")]
        style: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concepts detected in each image, as annotation JSON Lines.
    Detect {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-concept detection metrics against annotations.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-concept balanced-accuracy differences between two description styles.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value = "direct-binary")]
    pub schema: LabelSchema,
    /// Split file; tune uses train/val, train uses train, evaluate uses `--which`.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<(ScoreMatrix, LabeledDataset, Option<SplitSpec>)> {
        let scores = ScoreMatrix::load(&self.scores)?;
        let labels = load_binary_labels(&self.labels, &self.schema)?;
        let split = self.split.as_deref().map(SplitSpec::load).transpose()?;
        let labels = match &split {
            Some(s) if !s.dataset_tag.is_empty() => labels.with_tag(s.dataset_tag.clone()),
            _ => labels,
        };
        Ok((scores, labels, split))
    }
}

fn rows_for(scores: &ScoreMatrix, labels: &LabeledDataset, split: Option<&SplitSpec>, which: Split) -> Result<(ScoreMatrix, LabeledDataset)> {
    match split {
        Some(s) => split_rows(scores, labels, s, which),
        None => {
            let a = crate::datasets::align(scores, labels)?;
            Ok((a.scores, a.labels))
        }
    }
}

/// Normalized copy of `scores` using the model's frozen normalizer.
fn normalized_for(model: &SparseLinearModel, scores: ScoreMatrix) -> Result<ScoreMatrix> {
    if scores.is_normalized() {
        Ok(scores)
    } else {
        apply_normalizer(&model.normalizer, &scores)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Vocab(VocabCmd::Compile {
            input,
            template,
            mode,
            out,
            vocab_out,
        }) => {
            let vocab = select_bottleneck(&load_vocabulary(&input, template)?, mode)?;
            write_prompts(&out, &compile_prompts(&vocab))?;
            if let Some(p) = vocab_out {
                vocab.write_jsonl(&p)?;
            }
            println!("{} concepts, vocab hash {}", vocab.len(), vocab.content_hash());
        }
        Command::Embed(EmbedCmd::Images {
            model,
            input,
            out,
            batch_size,
        }) => {
            let handle = EncoderHandle::load(&model)?;
            let res = embed_images(&handle, &ImageItem::read_list(&input)?, batch_size)?;
            save_matrix(&res.matrix, &out)?;
            save_matrix_manifest(
                &out,
                &MatrixManifest {
                    kind: "image".into(),
                    vocab_hash: None,
                    checkpoint: Some(handle.manifest().checkpoint.clone()),
                },
            )?;
            for s in &res.skipped {
                log::warn!("skipped {}: {}", s.id, s.reason);
            }
            println!("{} embedded, {} skipped", res.matrix.len(), res.skipped.len());
        }
        Command::Embed(EmbedCmd::Texts {
            model,
            input,
            out,
            batch_size,
            vocab_hash,
        }) => {
            let handle = EncoderHandle::load(&model)?;
            let m = embed_texts(&handle, &read_prompts(&input)?, batch_size)?;
            save_matrix(&m, &out)?;
            save_matrix_manifest(
                &out,
                &MatrixManifest {
                    kind: "text".into(),
                    vocab_hash,
                    checkpoint: Some(handle.manifest().checkpoint.clone()),
                },
            )?;
        }
        Command::Score { images, concepts, out } => {
            let hash = load_matrix_manifest(&concepts)?.and_then(|m| m.vocab_hash);
            cosine_scores(&load_matrix(&images)?, &load_matrix(&concepts)?)?
                .with_vocab_hash(hash)
                .save(&out)?;
        }
        Command::Normalize {
            fit,
            apply,
            norm_out,
            out,
            scope,
        } => {
            let norm = fit_normalizer(&ScoreMatrix::load(&fit)?, scope)?;
            norm.save(&norm_out)?;
            match (apply, out) {
                (Some(a), Some(o)) => apply_normalizer(&norm, &ScoreMatrix::load(&a)?)?.save(&o)?,
                (None, None) => {}
                _ => return Err(Error::Config("--apply and --out go together".into())),
            }
        }
        Command::Train {
            data,
            c,
            max_iter,
            normalizer,
            out,
        } => {
            let (scores, labels, split) = data.load()?;
            let (s, l) = rows_for(&scores, &labels, split.as_ref(), Split::Train)?;
            let (norm, s) = match normalizer {
                Some(p) => (Normalizer::load(&p)?, s),
                None if s.is_normalized() => {
                    return Err(Error::Config("normalized scores need --normalizer".into()));
                }
                None => {
                    let n = fit_normalizer(&s, NormalizationScope::PerConcept)?;
                    let applied = apply_normalizer(&n, &s)?;
                    (n, applied)
                }
            };
            let model = train(&s, &l, &norm, c, max_iter, seed)?;
            save_model(&model, &out)?;
            println!("{} of {} weights nonzero", model.nonzero_count(), model.n_concepts());
        }
        Command::Tune {
            data,
            budget,
            strategy,
            out,
        } => {
            let (scores, labels, split) = data.load()?;
            let split = split.ok_or_else(|| Error::Config("tune needs --split with train and val ids".into()))?;
            let (ts, tl) = split_rows(&scores, &labels, &split, Split::Train)?;
            let (vs, vl) = split_rows(&scores, &labels, &split, Split::Val)?;
            if !ts.is_normalized() {
                return Err(Error::InvalidInput("tune expects normalized scores".into()));
            }
            let res = search(&ts, &tl, &vs, &vl, budget, strategy, seed)?;
            res.save(&out)?;
            println!(
                "best: C={} max_iter={} val F1={:.4}",
                res.best.c, res.best.max_iter, res.best.val_f1_macro
            );
        }
        Command::Evaluate { model, data, which, out } => {
            let (scores, labels, split) = data.load()?;
            let model = load_model(&model, scores.vocab_hash())?;
            let scores = normalized_for(&model, scores)?;
            let (s, l) = rows_for(&scores, &labels, split.as_ref(), which)?;
            let pred = predict_labels(&predict_proba(&model, &s)?);
            let report = EvaluationReport::from_counts(confusion(&pred, &l.labels)?);
            write_json(&out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Explain {
            model,
            scores,
            images,
            concepts,
            tau,
            basis,
            format,
            labels,
            schema,
            out,
        } => {
            let raw = match (scores, images, concepts) {
                (Some(s), _, _) => ScoreMatrix::load(&s)?,
                (None, Some(i), Some(c)) => {
                    let hash = load_matrix_manifest(&c)?.and_then(|m| m.vocab_hash);
                    cosine_scores(&load_matrix(&i)?, &load_matrix(&c)?)?.with_vocab_hash(hash)
                }
                _ => return Err(Error::Config("explain needs --scores or --images with --concepts".into())),
            };
            let model = load_model(&model, raw.vocab_hash())?;
            let labels = labels.map(|p| load_binary_labels(&p, &schema)).transpose()?;
            let doc = render_report(&explain_all(&model, &raw, tau, basis)?, labels.as_ref(), format)?;
            match out {
                Some(p) => write_text(&p, &doc)?,
                None => print!("{doc}"),
            }
        }
        Command::Zeroshot(cmd) => zeroshot(cmd)?,
        Command::Bias {
            models,
            out,
            svg,
            svg_rows,
            json,
        } => {
            let profiles = models
                .iter()
                .map(|p| load_model(p, None).map(|m| scale_weights(&m)))
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare(&profiles)?;
            cmp.write_csv(&out)?;
            if let Some(p) = svg {
                cmp.write_svg(&p, svg_rows)?;
            }
            if let Some(p) = json {
                write_json(&p, &cmp)?;
            }
        }
        Command::Run { config, stages } => {
            let manifest = run_pipeline(
                &config,
                &RunOptions {
                    seed: cli.seed,
                    cache_dir: cli.cache_dir,
                    stages,
                    command_line: std::env::args().collect(),
                },
            )?;
            for s in &manifest.stages {
                println!("{:<10} {:?} {}", s.stage.name(), s.status, &s.key[..12]);
            }
        }
        Command::Synth {
            out,
            n_images,
            n_concepts,
            n_planted,
            dim,
            rho,
            budget,
        } => {
            let cfg = PlantedConfig {
                n_images,
                n_concepts,
                n_planted,
                dim,
                rho,
                seed,
                ..Default::default()
            };
            let fixture = generate(&cfg)?;
            let paths = write_fixture(&out, &fixture, seed, budget)?;
            println!("planted: {}", fixture.planted.join(", "));
            println!("config: {}", paths.config.display());
        }
    }
    Ok(())
}

fn zeroshot(cmd: ZeroshotCmd) -> Result<()> {
    match cmd {
        ZeroshotCmd::Calibrate {
            scores,
            annotations,
            style,
            out,
        } => {
            let table = calibrate_thresholds(&ScoreMatrix::load(&scores)?, &ConceptAnnotations::load(&annotations)?, &style)?;
            table.save(&out)?;
            println!("{} thresholds, {} skipped", table.entries.len(), table.skipped.len());
        }
        ZeroshotCmd::Detect { scores, thresholds, out } => {
            detect_all(&ScoreMatrix::load(&scores)?, &ThresholdTable::load(&thresholds)?).save(&out)?;
        }
        ZeroshotCmd::Evaluate {
            scores,
            annotations,
            thresholds,
            out,
        } => {
            let report = evaluate_detection(
                &ScoreMatrix::load(&scores)?,
                &ConceptAnnotations::load(&annotations)?,
                &ThresholdTable::load(&thresholds)?,
            )?;
            write_json(&out, &report)?;
            println!("mean BA {:.4}, median BA {:.4}", report.mean_ba, report.median_ba);
        }
        ZeroshotCmd::Compare { a, b, out } => {
            let (a, b): (DetectionReport, DetectionReport) = (crate::embed::read_json(&a)?, crate::embed::read_json(&b)?);
            let cmp = compare_styles(&a, &b);
            write_json(&out, &cmp)?;
            println!("median BA difference {:.4}", cmp.median_delta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_tree_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = Cli::try_parse_from([
            "privlex", "train", "--scores", "s.pvx", "--labels", "l.csv", "--C", "0.5", "--max-iter", "20", "--seed", "4",
            "--out", "m.json",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(4));
        match cli.command {
            Command::Train { c, max_iter, .. } => assert_eq!((c, max_iter), (0.5, 20)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stage_list_parses() {
        let cli = Cli::try_parse_from(["privlex", "run", "--config", "p.toml", "--stages", "score,train"]).unwrap();
        match cli.command {
            Command::Run { stages, .. } => assert_eq!(stages, Some(vec![Stage::Score, Stage::Train])),
            other => panic!("{other:?}"),
        }
    }
}
