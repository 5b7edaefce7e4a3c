//! Staged training of the fusion + alignment head over frozen encoders.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{rank_row, AlignmentConfig};
use crate::checkpoint::{save_checkpoint, Checkpoint, SamplerState};
use crate::config::RunConfig;
use crate::datasets::{assemble_batch, epoch_batches, load_annotations, AnnotationFormat, AnnotationRecord, Batch};
use crate::encoders::{fold_name, Backbones, BoxPrompt, ImageInput, TextEmbeddingTable, TokenTap};
use crate::evaluator::{evaluate_recognition, EvalOptions, RegionPrediction};
use crate::fusion::FusionConfig;
use crate::model::{loss_and_grad, region_scores, ModelParameters, RegionExample};
use crate::optim::{adamw_step, step_decay_lr, AdamWConfig, AdamWState};
use crate::params::parameter_count;
use crate::{Error, Result};

/// Environment variable bounding loader parallelism.
pub const NUM_WORKERS_ENV: &str = "REGIONSPOT_NUM_WORKERS";

/// Worker count from [`NUM_WORKERS_ENV`]; unset means one per core.
pub fn num_workers() -> Result<usize> {
    match std::env::var(NUM_WORKERS_ENV) {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(
                NUM_WORKERS_ENV,
                format!("expected a positive integer, got {v:?}"),
            )),
        },
    }
}

/// One record with everything the frozen encoders say about it. Encoders
/// never change, so this is computed once per run.
#[derive(Clone, Debug)]
pub struct EncodedRecord {
    pub record: AnnotationRecord,
    pub image: ImageInput,
    /// `(M or M + 1, d_vil)`.
    pub memory: Array2<f32>,
    /// `(N, d_loc)` tokens of the annotated boxes.
    pub region_tokens: Array2<f32>,
}

/// Loads images and runs the encoders over `records`, in parallel but with
/// output order equal to input order.
pub fn encode_records(
    backbones: &Backbones,
    records: &[AnnotationRecord],
    tap: TokenTap,
    use_class_token: bool,
    workers: usize,
) -> Result<Vec<EncodedRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let image = ImageInput::load(&r.image_path, r.image_id.clone())?;
                let map = backbones.image.encode_vil_image(&image)?;
                let boxes: Vec<BoxPrompt> = r.regions.iter().map(|g| g.bbox).collect();
                let tokens = backbones.localization.encode_localization(&image, &boxes, tap)?;
                Ok(EncodedRecord {
                    record: r.clone(),
                    memory: map.memory(use_class_token),
                    region_tokens: tokens.tokens,
                    image,
                })
            })
            .collect()
    })
}

/// Unit text embeddings memoized per case-folded category name.
pub struct TextCache<'a> {
    backbones: &'a Backbones,
    template: String,
    rows: HashMap<String, Array1<f32>>,
}

impl<'a> TextCache<'a> {
    pub fn new(backbones: &'a Backbones, template: &str) -> Self {
        TextCache {
            backbones,
            template: template.to_string(),
            rows: HashMap::new(),
        }
    }

    pub fn table(&mut self, names: &[String]) -> Result<TextEmbeddingTable> {
        let dim = self.backbones.text.embedding_dim();
        let mut embeddings = Array2::zeros((names.len(), dim));
        for (k, name) in names.iter().enumerate() {
            let key = fold_name(name);
            if !self.rows.contains_key(&key) {
                let t = self.backbones.encode_text(std::slice::from_ref(name), &self.template)?;
                self.rows.insert(key.clone(), t.embeddings.row(0).to_owned());
            }
            embeddings.row_mut(k).assign(&self.rows[&key]);
        }
        Ok(TextEmbeddingTable {
            embeddings,
            category_names: names.to_vec(),
            template: self.template.clone(),
        })
    }
}

/// Trainable parameters with their optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParameters<f32>,
    pub optimizer: AdamWState<ModelParameters<f32>>,
}

impl TrainState {
    pub fn new(params: ModelParameters<f32>) -> Self {
        TrainState {
            optimizer: AdamWState::new(&params),
            params,
        }
    }
}

/// Forward, backward and one AdamW update. Returns the pre-update loss; a
/// non-finite loss aborts before touching the parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut TrainState,
    fusion: &FusionConfig,
    alignment: &AlignmentConfig,
    optimizer: &AdamWConfig,
    examples: &[RegionExample<f32>],
    text: &TextEmbeddingTable,
    lr: f64,
    iteration: u64,
    batch_id: &str,
) -> Result<f32> {
    let out = loss_and_grad(&state.params, fusion, alignment, examples, text.embeddings.view())?;
    if !out.loss.is_finite() {
        let dump = serde_json::json!({
            "vocabulary": text.category_names,
            "regions_per_example": examples.iter().map(|e| e.labels.len()).collect::<Vec<_>>(),
            "labels": examples.iter().map(|e| e.labels.clone()).collect::<Vec<_>>(),
        });
        return Err(Error::NonFiniteLoss {
            iteration,
            batch_id: batch_id.to_string(),
            dump: dump.to_string(),
        });
    }
    if out.regions > 0 {
        adamw_step(&mut state.params, &out.grad, &mut state.optimizer, optimizer, lr);
    }
    Ok(out.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Global 0-based index of the step.
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub iter: u64,
    pub stage: usize,
    pub top1: f64,
    pub map: f64,
}

/// Receives training progress. Every method defaults to doing nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _entry: &LogEntry) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _entry: &EvalEntry) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _tag: &str, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Writes `train_log.jsonl`, `eval_log.jsonl` and `checkpoints/{tag}.rsc`.
pub struct DirectoryObserver {
    dir: PathBuf,
    log: BufWriter<std::fs::File>,
    eval_log: Option<BufWriter<std::fs::File>>,
}

impl DirectoryObserver {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(Error::io(dir))?;
        let path = dir.join("train_log.jsonl");
        let file = std::fs::File::create(&path).map_err(Error::io(&path))?;
        Ok(DirectoryObserver {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
            eval_log: None,
        })
    }

    fn line(w: &mut BufWriter<std::fs::File>, path: &Path, value: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n").map_err(Error::io(path))
    }

    pub fn finish(mut self) -> Result<()> {
        let path = self.dir.join("train_log.jsonl");
        self.log.flush().map_err(Error::io(&path))?;
        if let Some(w) = self.eval_log.as_mut() {
            w.flush().map_err(Error::io(&path))?;
        }
        Ok(())
    }
}

impl TrainObserver for DirectoryObserver {
    fn on_step(&mut self, entry: &LogEntry) -> Result<()> {
        let path = self.dir.join("train_log.jsonl");
        Self::line(&mut self.log, &path, entry)
    }

    fn on_eval(&mut self, entry: &EvalEntry) -> Result<()> {
        let path = self.dir.join("eval_log.jsonl");
        if self.eval_log.is_none() {
            let f = std::fs::File::create(&path).map_err(Error::io(&path))?;
            self.eval_log = Some(BufWriter::new(f));
        }
        Self::line(self.eval_log.as_mut().expect("opened above"), &path, entry)
    }

    fn on_checkpoint(&mut self, tag: &str, ckpt: &Checkpoint) -> Result<()> {
        save_checkpoint(ckpt, &self.dir.join("checkpoints").join(format!("{tag}.rsc")))
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    pub evals: Vec<EvalEntry>,
    pub trainable_parameters: usize,
    pub backbone_parameters: usize,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
}

/// Uniform random boxes overlapping no annotated box by IoU 0.3 or more.
pub fn sample_negative_boxes(rng: &mut ChaCha8Rng, annotated: &[BoxPrompt], count: usize) -> Vec<BoxPrompt> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..32 {
            let w = rng.random_range(0.1..0.5);
            let h = rng.random_range(0.1..0.5);
            let x1 = rng.random_range(0.0..1.0 - w);
            let y1 = rng.random_range(0.0..1.0 - h);
            let b = BoxPrompt {
                x1,
                y1,
                x2: x1 + w,
                y2: y1 + h,
            };
            if annotated.iter().all(|a| a.iou(&b) < 0.3) {
                out.push(b);
                break;
            }
        }
    }
    out
}

fn load_stage_datasets(config: &RunConfig) -> Result<HashMap<String, Vec<AnnotationRecord>>> {
    let mut loaded = HashMap::new();
    for stage in &config.train.stages {
        for id in &stage.datasets {
            if loaded.contains_key(id) {
                continue;
            }
            let path = &config.datasets[id];
            let set = load_annotations(path, AnnotationFormat::CocoJson)?;
            if set.records.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "dataset {id:?} ({}) has no images",
                    path.display()
                )));
            }
            loaded.insert(id.clone(), set.records);
        }
    }
    Ok(loaded)
}

/// Top-1 accuracy and fixed-box mAP of `params` on annotated records, scored
/// over `vocabulary`.
pub fn evaluate_encoded(
    params: &ModelParameters<f32>,
    config: &RunConfig,
    records: &[EncodedRecord],
    text: &TextEmbeddingTable,
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut predictions = Vec::new();
    for r in records {
        if r.record.regions.is_empty() {
            continue;
        }
        let (scores, _) = region_scores(
            params,
            &config.fusion,
            r.region_tokens.view(),
            r.memory.view(),
            text.embeddings.view(),
        )?;
        let ranked = crate::alignment::predict_labels(&scores, &text.category_names, config.eval.top_k)?;
        for ((row, region), top) in scores.logits.outer_iter().zip(&r.record.regions).zip(ranked) {
            let best = rank_row(row)[0];
            correct += usize::from(fold_name(&text.category_names[best]) == fold_name(&region.category));
            total += 1;
            predictions.push(RegionPrediction {
                image_id: r.record.image_id.clone(),
                bbox: region.bbox,
                top,
            });
        }
    }
    let gt: Vec<AnnotationRecord> = records.iter().map(|r| r.record.clone()).collect();
    let report = evaluate_recognition(&predictions, &gt, &EvalOptions::default())?;
    let top1 = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok((top1, report.map))
}

/// Runs every stage in order with the toy backbones the config describes.
pub fn run_training(config: &RunConfig, observer: &mut dyn TrainObserver) -> Result<TrainingOutcome> {
    config.validate()?;
    let backbones = Backbones::toy(&config.encoder)?;
    run_training_with(config, &backbones, observer)
}

pub fn run_training_with(
    config: &RunConfig,
    backbones: &Backbones,
    observer: &mut dyn TrainObserver,
) -> Result<TrainingOutcome> {
    let train = &config.train;
    // every dataset is read before the first update
    let datasets = load_stage_datasets(config)?;
    let workers = num_workers()?;
    let backbone_before = backbones.backbone_parameters();
    let mut encoded: HashMap<String, Vec<EncodedRecord>> = HashMap::new();
    let mut ids: Vec<&String> = datasets.keys().collect();
    ids.sort();
    for id in ids {
        let recs = encode_records(
            backbones,
            &datasets[id],
            config.prompt.token_tap,
            config.fusion.use_class_token,
            workers,
        )?;
        encoded.insert(id.clone(), recs);
    }

    let mut ckpt = Checkpoint::initial(
        &config.encoder,
        &config.fusion,
        &config.alignment,
        &config.prompt,
        Some(train),
        train.seed,
    )?;
    let trainable = parameter_count(&ckpt.params);
    let backbone_count = backbone_before.parameter_count();
    log::info!(
        "trainable parameters: {trainable} (backbones frozen: {backbone_count}, ratio {:.4})",
        trainable as f64 / backbone_count.max(1) as f64
    );
    let mut state = TrainState::new(ckpt.params.clone());
    let mut text_cache = TextCache::new(backbones, &config.prompt.template);
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut iteration = 0u64;

    for (s, stage) in train.stages.iter().enumerate() {
        let records: Vec<&EncodedRecord> = stage.datasets.iter().flat_map(|id| encoded[id].iter()).collect();
        let plain: Vec<AnnotationRecord> = records.iter().map(|r| r.record.clone()).collect();
        let stage_vocab: Vec<String> = crate::datasets::LabelSpace::from_records(&plain).names().to_vec();
        state.optimizer.reset();
        let mut sampler = SamplerState {
            seed: train.seed,
            epoch: 0,
            cursor: 0,
        };
        let mut epoch_plan = epoch_batches(plain.len(), train.batch_size, sampler.seed, sampler.epoch);
        log::info!("stage {s}: {} images, {} iterations", plain.len(), stage.iterations);

        for t in 0..stage.iterations {
            if sampler.cursor as usize >= epoch_plan.len() {
                sampler.epoch += 1;
                sampler.cursor = 0;
                epoch_plan = epoch_batches(plain.len(), train.batch_size, sampler.seed, sampler.epoch);
            }
            let batch: Batch = assemble_batch(&plain, &epoch_plan[sampler.cursor as usize]);
            let batch_id = format!("stage{s}/epoch{}/batch{}", sampler.epoch, sampler.cursor);
            sampler.cursor += 1;

            let text = text_cache.table(&batch.vocabulary)?;
            let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
            rng.set_stream(iteration + 1);
            let mut examples = Vec::with_capacity(batch.items.len());
            for item in &batch.items {
                let enc = records[item.record];
                let mut labels: Vec<Option<usize>> = item.targets.iter().map(|&t| Some(t)).collect();
                let mut tokens = enc.region_tokens.clone();
                if train.negative_boxes_per_image > 0 {
                    let neg = sample_negative_boxes(&mut rng, &item.boxes, train.negative_boxes_per_image);
                    if !neg.is_empty() {
                        let nt =
                            backbones
                                .localization
                                .encode_localization(&enc.image, &neg, config.prompt.token_tap)?;
                        tokens =
                            concatenate(Axis(0), &[tokens.view(), nt.tokens.view()]).expect("matching token widths");
                        labels.extend(std::iter::repeat_n(None, neg.len()));
                    }
                }
                examples.push(RegionExample {
                    position_tokens: tokens,
                    memory: enc.memory.clone(),
                    labels,
                });
            }

            let lr = step_decay_lr(train.base_lr, &train.lr_decay_points, train.decay_factor, t);
            let loss = train_step(
                &mut state,
                &config.fusion,
                &config.alignment,
                &train.optimizer,
                &examples,
                &text,
                lr,
                iteration,
                &batch_id,
            )?;
            let entry = LogEntry {
                iter: iteration,
                loss: loss as f64,
                lr,
                stage: s,
            };
            observer.on_step(&entry)?;
            log.push(entry);
            iteration += 1;

            if train.eval_every > 0 && iteration.is_multiple_of(train.eval_every) {
                let snapshot = state.params.clone();
                let owned: Vec<EncodedRecord> = records.iter().map(|r| (*r).clone()).collect();
                let table = text_cache.table(&stage_vocab)?;
                let (top1, map) = evaluate_encoded(&snapshot, config, &owned, &table)?;
                let e = EvalEntry {
                    iter: iteration,
                    stage: s,
                    top1,
                    map,
                };
                log::info!("iter {iteration}: loss {loss:.5} top1 {top1:.3} mAP {:.1}", map * 100.0);
                observer.on_eval(&e)?;
                evals.push(e);
                fill_checkpoint(&mut ckpt, &state, iteration, s, sampler);
                observer.on_checkpoint(&format!("iter_{iteration:07}"), &ckpt)?;
            }
        }
        fill_checkpoint(&mut ckpt, &state, iteration, s, sampler);
        observer.on_checkpoint(&format!("stage_{s}"), &ckpt)?;
    }

    let backbone_after = backbones.backbone_parameters();
    Ok(TrainingOutcome {
        checkpoint: ckpt,
        log,
        evals,
        trainable_parameters: trainable,
        backbone_parameters: backbone_count,
        backbone_checksum_before: backbone_before.checksum(),
        backbone_checksum_after: backbone_after.checksum(),
    })
}

fn fill_checkpoint(ckpt: &mut Checkpoint, state: &TrainState, iteration: u64, stage: usize, rng: SamplerState) {
    ckpt.params = state.params.clone();
    ckpt.optimizer = state.optimizer.clone();
    ckpt.iteration = iteration;
    ckpt.stage = stage;
    ckpt.rng = rng;
}
