//! `regionspot`: train, infer, eval and attn over COCO-style annotation files.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid arguments, config or
//! input data. On a validation failure nothing is written.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use regionspot::checkpoint::{load_checkpoint, save_checkpoint};
use regionspot::config::RunConfig;
use regionspot::datasets::synthetic::{generate, SyntheticSpec};
use regionspot::datasets::{load_annotations, load_vocabulary, AnnotationFormat, AnnotationSet};
use regionspot::encoders::{BoxPrompt, ImageInput};
use regionspot::evaluator::{
    evaluate_recognition, load_predictions, load_proposals, write_predictions, write_report, EvalMode, EvalOptions,
    ProposalSet, Recognizer,
};
use regionspot::trainer::{run_training, DirectoryObserver};
use regionspot::Error;

#[derive(Parser)]
#[command(
    name = "regionspot",
    version,
    about = "Region recognition with a light fusion head over frozen encoders"
)]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the fusion head; writes checkpoint.rsc, train_log.jsonl and per-stage checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label boxes (ground truth, or --proposals) on the images of an annotation file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// COCO-style file listing the images (and their ground-truth boxes).
        #[arg(long)]
        annotations: PathBuf,
        /// JSON lines {image_id, bbox, score}; defaults to the annotated boxes.
        #[arg(long)]
        proposals: Option<PathBuf>,
        /// Category names, one per line or a JSON array; defaults to the annotation categories.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against annotations; writes report.json and report.txt.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Run config whose `eval` section supplies mode and bucket thresholds.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Annotation file whose instance counts define the frequency buckets.
        #[arg(long)]
        frequencies: Option<PathBuf>,
        /// Vocabulary the predictions were made over; other categories are flagged.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-box cross-attention heatmaps at one fusion layer.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single image; pair with --box.
        #[arg(long, conflicts_with = "annotations", requires = "boxes")]
        image: Option<PathBuf>,
        /// Normalized `x1,y1,x2,y2`; repeatable.
        #[arg(long = "box", value_parser = parse_box)]
        boxes: Vec<BoxPrompt>,
        /// Export for every annotated box of every image instead.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic dataset of colored boxes.
    Synth {
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long, default_value_t = 3)]
        regions: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    FixedBox,
    Detection,
}

fn parse_box(s: &str) -> Result<BoxPrompt, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let c: [f64; 4] = v
        .try_into()
        .map_err(|_| "expected four comma-separated numbers".to_string())?;
    BoxPrompt::try_from(c).map_err(|e| e.to_string())
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. }
            | Error::Template(_)
            | Error::InvalidBox { .. }
            | Error::InvalidInput(_)
            | Error::DuplicateCategory(_)
            | Error::Range { .. }
            | Error::Format { .. }
            | Error::Referential { .. }
            | Error::UnsupportedVersion { .. }
            | Error::UnmatchedPrediction { .. } => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out, cli.seed),
        Command::Infer {
            checkpoint,
            annotations,
            proposals,
            vocab,
            top_k,
            out,
        } => cmd_infer(
            &checkpoint,
            &annotations,
            proposals.as_deref(),
            vocab.as_deref(),
            top_k,
            &out,
        ),
        Command::Eval {
            predictions,
            annotations,
            config,
            mode,
            frequencies,
            vocab,
            out,
        } => cmd_eval(
            &predictions,
            &annotations,
            config.as_deref(),
            mode,
            frequencies.as_deref(),
            vocab.as_deref(),
            &out,
        ),
        Command::Attn {
            checkpoint,
            image,
            boxes,
            annotations,
            layer,
            out,
        } => cmd_attn(
            &checkpoint,
            image.as_deref(),
            &boxes,
            annotations.as_deref(),
            layer,
            &out,
        ),
        Command::Synth { images, regions, out } => cmd_synth(images, regions, cli.seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut config = RunConfig::load(config_path).map_err(|e| match e {
        Error::Io { .. } => Failure::Validation(e.to_string()),
        other => other.into(),
    })?;
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    for (id, path) in &config.datasets {
        if !path.is_file() {
            return Err(Failure::Validation(format!(
                "invalid config field `datasets.{id}`: {} does not exist",
                path.display()
            )));
        }
    }
    let mut observer = DirectoryObserver::new(out)?;
    let resolved = out.join("config.json");
    let text = serde_json::to_string_pretty(&config).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(&resolved, text + "\n").map_err(|e| runtime(Error::io(&resolved)(e)))?;
    let outcome = run_training(&config, &mut observer).map_err(runtime)?;
    observer.finish().map_err(runtime)?;
    save_checkpoint(&outcome.checkpoint, &out.join("checkpoint.rsc")).map_err(runtime)?;
    if outcome.backbone_checksum_before != outcome.backbone_checksum_after {
        return Err(Failure::Runtime("backbone parameters changed during training".into()));
    }
    log::info!(
        "done: {} iterations, final loss {:.6}, trainable {} / frozen {} parameters",
        outcome.checkpoint.iteration,
        outcome.log.last().map_or(f64::NAN, |e| e.loss),
        outcome.trainable_parameters,
        outcome.backbone_parameters
    );
    Ok(())
}

fn load_set(path: &Path) -> Result<AnnotationSet, Failure> {
    load_annotations(path, AnnotationFormat::CocoJson).map_err(|e| match e {
        Error::Io { .. } => Failure::Validation(e.to_string()),
        other => other.into(),
    })
}

fn cmd_infer(
    checkpoint: &Path,
    annotations: &Path,
    proposals: Option<&Path>,
    vocab: Option<&Path>,
    top_k: usize,
    out: &Path,
) -> CmdResult {
    let set = load_set(annotations)?;
    let names = match vocab {
        Some(p) => load_vocabulary(p)?,
        None => set.categories.names().to_vec(),
    };
    let proposals = match proposals {
        Some(p) => load_proposals(p)?,
        None => ProposalSet::from_ground_truth(&set.records),
    };
    for id in proposals.per_image.keys() {
        if !set.records.iter().any(|r| &r.image_id == id) {
            return Err(Failure::Validation(format!("proposals reference unknown image {id:?}")));
        }
    }
    let model = Recognizer::new(load_checkpoint(checkpoint)?)?;
    let table = model.vocabulary(&names)?;
    let mut records: Vec<_> = set.records.iter().collect();
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut predictions = Vec::new();
    for r in records {
        let boxes = proposals.get(&r.image_id);
        if boxes.is_empty() {
            continue;
        }
        let image = ImageInput::load(&r.image_path, r.image_id.clone()).map_err(runtime)?;
        predictions.extend(model.infer_regions(&image, boxes, &table, top_k)?);
    }
    std::fs::create_dir_all(out).map_err(|e| runtime(Error::io(out)(e)))?;
    write_predictions(&out.join("predictions.jsonl"), &predictions).map_err(runtime)?;
    log::info!("wrote {} region predictions", predictions.len());
    Ok(())
}

fn cmd_eval(
    predictions: &Path,
    annotations: &Path,
    config: Option<&Path>,
    mode: Option<ModeArg>,
    frequencies: Option<&Path>,
    vocab: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let eval_cfg = match config {
        Some(p) => RunConfig::load(p)?.eval,
        None => Default::default(),
    };
    let set = load_set(annotations)?;
    let preds = load_predictions(predictions)?;
    let options = EvalOptions {
        mode: match mode {
            Some(ModeArg::FixedBox) => EvalMode::FixedBox,
            Some(ModeArg::Detection) => EvalMode::Detection,
            None => eval_cfg.mode,
        },
        iou_threshold: eval_cfg.iou_threshold,
        rare_below: eval_cfg.rare_below,
        common_below: eval_cfg.common_below,
        frequencies: match frequencies {
            Some(p) => Some(load_set(p)?.categories),
            None => None,
        },
        vocabulary: match vocab {
            Some(p) => Some(load_vocabulary(p)?),
            None => None,
        },
    };
    let report = evaluate_recognition(&preds, &set.records, &options)?;
    write_report(out, &report).map_err(runtime)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_attn(
    checkpoint: &Path,
    image: Option<&Path>,
    boxes: &[BoxPrompt],
    annotations: Option<&Path>,
    layer: usize,
    out: &Path,
) -> CmdResult {
    let mut jobs: Vec<(PathBuf, String, Vec<BoxPrompt>)> = Vec::new();
    match (image, annotations) {
        (Some(path), None) => {
            let stem = path
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().into_owned());
            jobs.push((path.to_path_buf(), stem, boxes.to_vec()));
        }
        (None, Some(ann)) => {
            for r in load_set(ann)?.records {
                let b = r.regions.iter().map(|g| g.bbox).collect();
                jobs.push((r.image_path.clone(), r.image_id.clone(), b));
            }
        }
        _ => {
            return Err(Failure::Validation(
                "pass either --image with --box, or --annotations".into(),
            ))
        }
    }
    let ckpt = load_checkpoint(checkpoint)?;
    if layer >= ckpt.fusion.depth {
        return Err(Error::Range {
            what: "fusion layer",
            index: layer,
            limit: ckpt.fusion.depth,
        }
        .into());
    }
    let model = Recognizer::new(ckpt)?;
    for (path, id, b) in jobs {
        let img = ImageInput::load(&path, id.clone()).map_err(runtime)?;
        let export = model.export_attention(&img, &b, layer)?;
        let written = export.write(out, &id).map_err(runtime)?;
        log::info!("{id}: wrote {} files", written.len());
    }
    Ok(())
}

fn cmd_synth(images: usize, regions: usize, seed: Option<u64>, out: &Path) -> CmdResult {
    let spec = SyntheticSpec {
        images,
        regions_per_image: regions,
        seed: seed.unwrap_or(0),
        ..SyntheticSpec::default()
    };
    let path = generate(out, &spec)?;
    println!("{}", path.display());
    Ok(())
}
