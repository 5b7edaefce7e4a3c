//! Fixed-box region recognition: inference over given boxes, average
//! precision with frequency buckets, and cross-attention export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::alignment::{predict_labels, MatchingScores, ScoredLabel};
use crate::checkpoint::Checkpoint;
use crate::container::{line_col_to_offset, ArrayContainer};
use crate::datasets::{AnnotationRecord, LabelSpace};
use crate::encoders::{fold_name, Backbones, BoxPrompt, ImageInput, SemanticFeatureMap, TextEmbeddingTable};
use crate::fusion::{fusion_forward_traced, grid_attention, FusionConfig, FusionTrace};
use crate::model::{region_scores, ModelParameters};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Every prediction is made on a ground-truth box; only labels are scored.
    #[default]
    FixedBox,
    /// Predictions on external proposals, matched greedily at an IoU threshold.
    Detection,
}

/// One externally proposed box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub image_id: String,
    pub bbox: BoxPrompt,
    /// Objectness in `[0, 1]`.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// Proposals grouped per image, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    pub per_image: BTreeMap<String, Vec<Proposal>>,
}

impl ProposalSet {
    /// Ground-truth boxes as proposals with objectness 1.
    pub fn from_ground_truth(records: &[AnnotationRecord]) -> Self {
        let mut per_image = BTreeMap::new();
        for r in records {
            let list = r
                .regions
                .iter()
                .map(|reg| Proposal {
                    image_id: r.image_id.clone(),
                    bbox: reg.bbox,
                    score: 1.0,
                    source: Some("ground_truth".into()),
                })
                .collect();
            per_image.insert(r.image_id.clone(), list);
        }
        ProposalSet { per_image }
    }

    pub fn get(&self, image_id: &str) -> &[Proposal] {
        self.per_image.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.per_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn validate_proposal(p: &Proposal, index: usize) -> Result<()> {
    p.bbox.validate(index)?;
    if !(0.0..=1.0).contains(&p.score) {
        return Err(Error::InvalidInput(format!(
            "proposal {index} has objectness {} outside [0, 1]",
            p.score
        )));
    }
    Ok(())
}

/// Reads JSON lines `{image_id, bbox: [x1, y1, x2, y2], score, source?}`.
pub fn load_proposals(path: &Path) -> Result<ProposalSet> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut set = ProposalSet::default();
    let mut offset = 0usize;
    let mut index = 0usize;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(Error::io(path))?;
        let start = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let p: Proposal = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: start + line_col_to_offset(line.as_bytes(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        validate_proposal(&p, index)?;
        set.per_image.entry(p.image_id.clone()).or_default().push(p);
        index += 1;
    }
    Ok(set)
}

/// Ranked labels for one box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPrediction {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoxPrompt,
    /// Highest-scoring categories first; score = probability x objectness.
    pub top: Vec<ScoredLabel>,
}

pub fn write_predictions(path: &Path, predictions: &[RegionPrediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

pub fn load_predictions(path: &Path) -> Result<Vec<RegionPrediction>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.trim().is_empty() {
            out.push(serde_json::from_str(trimmed).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: offset + line_col_to_offset(trimmed.as_bytes(), e.line(), e.column()),
                message: e.to_string(),
            })?);
        }
        offset += line.len();
    }
    Ok(out)
}

/// A frozen encoder trio plus a trained head.
pub struct Recognizer {
    pub backbones: Backbones,
    pub checkpoint: Checkpoint,
}

impl Recognizer {
    /// Pairs the checkpoint with the toy backbones its encoder spec describes.
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let backbones = Backbones::toy(&checkpoint.encoder)?;
        Ok(Recognizer { backbones, checkpoint })
    }

    pub fn params(&self) -> &ModelParameters<f32> {
        &self.checkpoint.params
    }

    pub fn fusion_config(&self) -> &FusionConfig {
        &self.checkpoint.fusion
    }

    pub fn vocabulary(&self, names: &[String]) -> Result<TextEmbeddingTable> {
        if names.is_empty() {
            return Err(Error::InvalidInput("vocabulary is empty".into()));
        }
        self.backbones.encode_text(names, &self.checkpoint.prompt.template)
    }

    /// Logits `(N, K)` for the boxes of one image, with the fusion trace.
    pub fn score_boxes(
        &self,
        image: &ImageInput,
        boxes: &[BoxPrompt],
        table: &TextEmbeddingTable,
    ) -> Result<(MatchingScores<f32>, FusionTrace<f32>, SemanticFeatureMap)> {
        let map = self.backbones.image.encode_vil_image(image)?;
        let tokens = self
            .backbones
            .localization
            .encode_localization(image, boxes, self.checkpoint.prompt.token_tap)?;
        let memory = map.memory(self.checkpoint.fusion.use_class_token);
        let (scores, trace) = region_scores(
            self.params(),
            self.fusion_config(),
            tokens.tokens.view(),
            memory.view(),
            table.embeddings.view(),
        )?;
        Ok((scores, trace, map))
    }

    /// Ranked labels per proposal, in proposal order.
    pub fn infer_regions(
        &self,
        image: &ImageInput,
        proposals: &[Proposal],
        table: &TextEmbeddingTable,
        top_k: usize,
    ) -> Result<Vec<RegionPrediction>> {
        if table.is_empty() {
            return Err(Error::InvalidInput("vocabulary is empty".into()));
        }
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        for (i, p) in proposals.iter().enumerate() {
            validate_proposal(p, i)?;
        }
        let boxes: Vec<BoxPrompt> = proposals.iter().map(|p| p.bbox).collect();
        let (scores, _, _) = self.score_boxes(image, &boxes, table)?;
        let ranked = predict_labels(&scores, &table.category_names, top_k)?;
        Ok(proposals
            .iter()
            .zip(ranked)
            .map(|(p, mut top)| {
                for label in &mut top {
                    label.score *= p.score;
                }
                RegionPrediction {
                    image_id: image.id().to_string(),
                    bbox: p.bbox,
                    top,
                }
            })
            .collect())
    }

    /// Per-box cross-attention over the image grid at `layer`, class-token
    /// column removed and rows renormalized, shaped `grid_hw`.
    pub fn export_attention(&self, image: &ImageInput, boxes: &[BoxPrompt], layer: usize) -> Result<AttentionExport> {
        check_layer(self.fusion_config(), layer)?;
        let map = self.backbones.image.encode_vil_image(image)?;
        let tokens = self
            .backbones
            .localization
            .encode_localization(image, boxes, self.checkpoint.prompt.token_tap)?;
        let heatmaps = attention_heatmaps(self.params(), self.fusion_config(), tokens.tokens.view(), &map, layer)?;
        Ok(AttentionExport {
            image_id: image.id().to_string(),
            layer,
            grid_hw: map.grid_hw,
            boxes: boxes.to_vec(),
            heatmaps,
        })
    }
}

fn check_layer(config: &FusionConfig, layer: usize) -> Result<()> {
    if layer >= config.depth {
        return Err(Error::Range {
            what: "fusion layer",
            index: layer,
            limit: config.depth,
        });
    }
    Ok(())
}

/// Heatmaps from raw position tokens; the building block of
/// [`Recognizer::export_attention`].
pub fn attention_heatmaps(
    params: &ModelParameters<f32>,
    config: &FusionConfig,
    position_tokens: ArrayView2<f32>,
    map: &SemanticFeatureMap,
    layer: usize,
) -> Result<Vec<Array2<f32>>> {
    check_layer(config, layer)?;
    let memory = map.memory(config.use_class_token);
    let (_, trace) = fusion_forward_traced(&params.fusion, config, position_tokens, memory.view())?;
    let record = trace
        .cross_attention()
        .nth(layer)
        .expect("one cross-attention record per layer");
    let grid = grid_attention(record, map.num_tokens())?;
    let (rows, cols) = map.grid_hw;
    grid.outer_iter()
        .map(|row| {
            row.to_owned()
                .into_shape_with_order((rows, cols))
                .map_err(|e| Error::shape("heatmap", format!("{rows}x{cols}"), e.to_string()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub image_id: String,
    pub layer: usize,
    pub grid_hw: (usize, usize),
    pub boxes: Vec<BoxPrompt>,
    pub heatmaps: Vec<Array2<f32>>,
}

pub const ATTENTION_KIND: &str = "attention";

impl AttentionExport {
    /// Writes `{stem}_box{i}.png` (8-bit grayscale, scaled by the row max)
    /// per box plus `{stem}_attention.rsa`, the raw float sidecar.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut written = Vec::new();
        for (i, h) in self.heatmaps.iter().enumerate() {
            let path = dir.join(format!("{stem}_box{i}.png"));
            let max = h.iter().cloned().fold(0.0f32, f32::max);
            let (rows, cols) = h.dim();
            let pixels: Vec<u8> = h
                .iter()
                .map(|&v| {
                    if max > 0.0 {
                        (v / max * 255.0).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                })
                .collect();
            let img = image::GrayImage::from_raw(cols as u32, rows as u32, pixels).expect("buffer matches size");
            img.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            written.push(path);
        }
        let meta = serde_json::json!({
            "image_id": self.image_id,
            "layer": self.layer,
            "grid_hw": [self.grid_hw.0, self.grid_hw.1],
            "boxes": self.boxes,
        });
        let mut c = ArrayContainer::new(ATTENTION_KIND, meta);
        for (i, h) in self.heatmaps.iter().enumerate() {
            c.push(format!("box{i}"), h.clone().into_dyn());
        }
        let sidecar = dir.join(format!("{stem}_attention.rsa"));
        c.write(&sidecar)?;
        written.push(sidecar);
        Ok(written)
    }
}

/// Frequency bucket of a category by training-instance count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Rare,
    Common,
    Frequent,
}

impl Bucket {
    pub fn of(count: u64, rare_below: u64, common_below: u64) -> Bucket {
        if count < rare_below {
            Bucket::Rare
        } else if count < common_below {
            Bucket::Common
        } else {
            Bucket::Frequent
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    /// Detection mode only.
    pub iou_threshold: f64,
    pub rare_below: u64,
    pub common_below: u64,
    /// Training-set instance counts; the evaluated ground truth is used when
    /// absent.
    pub frequencies: Option<LabelSpace>,
    /// The vocabulary predictions were made over; ground-truth categories
    /// outside it are flagged.
    pub vocabulary: Option<Vec<String>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::FixedBox,
            iou_threshold: 0.5,
            rare_below: 10,
            common_below: 100,
            frequencies: None,
            vocabulary: None,
        }
    }
}

/// IoU at or above which a fixed-box prediction is the same box as a
/// ground-truth region; slack for boxes that round-tripped through pixels.
pub const SAME_BOX_IOU: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: String,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub frequency: u64,
    pub bucket: Bucket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// Means in `[0, 1]`; a bucket without categories is `null`.
    pub map: f64,
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    pub per_category: Vec<CategoryAp>,
    /// Ground-truth categories absent from the vocabulary (scored as misses).
    pub missing_categories: Vec<String>,
    pub num_images: usize,
    pub num_regions: usize,
    pub num_predictions: usize,
    pub rare_below: u64,
    pub common_below: u64,
    pub iou_threshold: f64,
}

impl EvalReport {
    /// Plain-text table with APs shown x100.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0));
        let width = self
            .per_category
            .iter()
            .map(|c| c.category.len())
            .max()
            .unwrap_or(8)
            .max(8);
        let mut s = String::new();
        s.push_str(&format!(
            "mode {:?}  images {}  regions {}  predictions {}\n",
            self.mode, self.num_images, self.num_regions, self.num_predictions
        ));
        s.push_str(&format!(
            "mAP {}  AP_r {}  AP_c {}  AP_f {}  (rare < {}, common < {})\n",
            fmt(Some(self.map)),
            fmt(self.ap_r),
            fmt(self.ap_c),
            fmt(self.ap_f),
            self.rare_below,
            self.common_below
        ));
        s.push_str(&format!(
            "{:<width$}  {:>6}  {:>5}  {:>6}  bucket\n",
            "category", "AP", "gt", "freq"
        ));
        for c in &self.per_category {
            s.push_str(&format!(
                "{:<width$}  {:>6.1}  {:>5}  {:>6}  {:?}\n",
                c.category,
                c.ap * 100.0,
                c.num_gt,
                c.frequency,
                c.bucket
            ));
        }
        if !self.missing_categories.is_empty() {
            s.push_str(&format!(
                "missing from vocabulary: {}\n",
                self.missing_categories.join(", ")
            ));
        }
        s
    }
}

/// 101-point interpolated AP of a ranked list of hit flags against `num_gt`
/// positives. Recall thresholds are compared exactly in integers.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut tp = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut t = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        t += usize::from(h);
        tp.push(t);
        precision.push(t as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for level in 0..=100usize {
        // first rank whose recall tp/num_gt reaches level/100
        while idx < tp.len() && tp[idx] * 100 < level * num_gt {
            idx += 1;
        }
        if idx == tp.len() {
            break;
        }
        sum += precision[idx];
    }
    sum / 101.0
}

struct Detection {
    score: f64,
    image: usize,
    bbox: BoxPrompt,
    /// Fixed-box mode: the matched ground-truth region.
    region: Option<usize>,
}

/// Scores predictions against ground truth.
pub fn evaluate_recognition(
    predictions: &[RegionPrediction],
    ground_truth: &[AnnotationRecord],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if options.rare_below > options.common_below {
        return Err(Error::InvalidInput("rare_below exceeds common_below".into()));
    }
    let image_index: BTreeMap<&str, usize> = ground_truth
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();
    let gt_labels: Vec<Vec<String>> = ground_truth
        .iter()
        .map(|r| r.regions.iter().map(|g| fold_name(&g.category)).collect())
        .collect();
    let gt_space = LabelSpace::from_records(ground_truth);

    // resolve every prediction to its image (and box, in fixed-box mode)
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|r| vec![false; r.regions.len()]).collect();
    let mut resolved = Vec::with_capacity(predictions.len());
    for (index, p) in predictions.iter().enumerate() {
        let unmatched = || Error::UnmatchedPrediction {
            index,
            image_id: p.image_id.clone(),
        };
        let &image = image_index.get(p.image_id.as_str()).ok_or_else(unmatched)?;
        let region = match options.mode {
            EvalMode::Detection => None,
            EvalMode::FixedBox => {
                let regions = &ground_truth[image].regions;
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in regions.iter().enumerate() {
                    let iou = g.bbox.iou(&p.bbox);
                    if !used[image][j] && iou >= SAME_BOX_IOU && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                let (j, _) = best.ok_or_else(unmatched)?;
                used[image][j] = true;
                Some(j)
            }
        };
        resolved.push((image, region));
    }

    let vocabulary: Option<BTreeSet<String>> = options
        .vocabulary
        .as_ref()
        .map(|v| v.iter().map(|n| fold_name(n)).collect());
    let mut per_category = Vec::new();
    let mut missing = Vec::new();
    for (k, name) in gt_space.names().iter().enumerate() {
        let num_gt = gt_space.counts()[k] as usize;
        if num_gt == 0 {
            continue;
        }
        let mut dets = Vec::new();
        for (p, &(image, region)) in predictions.iter().zip(&resolved) {
            for label in &p.top {
                if fold_name(&label.category) == *name {
                    dets.push(Detection {
                        score: label.score,
                        image,
                        bbox: p.bbox,
                        region,
                    });
                }
            }
        }
        // stable: equal scores keep prediction order
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let hits: Vec<bool> = match options.mode {
            EvalMode::FixedBox => dets
                .iter()
                .map(|d| gt_labels[d.image][d.region.expect("resolved")] == *name)
                .collect(),
            EvalMode::Detection => {
                let mut taken: Vec<Vec<bool>> = gt_labels.iter().map(|l| vec![false; l.len()]).collect();
                dets.iter()
                    .map(|d| {
                        let mut best: Option<(usize, f64)> = None;
                        for (j, g) in ground_truth[d.image].regions.iter().enumerate() {
                            if taken[d.image][j] || gt_labels[d.image][j] != *name {
                                continue;
                            }
                            let iou = g.bbox.iou(&d.bbox);
                            if iou >= options.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                                best = Some((j, iou));
                            }
                        }
                        match best {
                            Some((j, _)) => {
                                taken[d.image][j] = true;
                                true
                            }
                            None => false,
                        }
                    })
                    .collect()
            }
        };
        let in_vocab = vocabulary.as_ref().is_none_or(|v| v.contains(name));
        if !in_vocab {
            missing.push(name.clone());
        }
        let frequency = match &options.frequencies {
            Some(f) => f.count_of(name).unwrap_or(0),
            None => num_gt as u64,
        };
        per_category.push(CategoryAp {
            category: name.clone(),
            ap: if in_vocab { interpolated_ap(&hits, num_gt) } else { 0.0 },
            num_gt,
            num_detections: dets.len(),
            frequency,
            bucket: Bucket::of(frequency, options.rare_below, options.common_below),
        });
    }
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = it.collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let bucket_mean = |b: Bucket| mean(&mut per_category.iter().filter(|c| c.bucket == b).map(|c| c.ap));
    Ok(EvalReport {
        mode: options.mode,
        map: mean(&mut per_category.iter().map(|c| c.ap)).unwrap_or(0.0),
        ap_r: bucket_mean(Bucket::Rare),
        ap_c: bucket_mean(Bucket::Common),
        ap_f: bucket_mean(Bucket::Frequent),
        missing_categories: missing,
        num_images: ground_truth.len(),
        num_regions: ground_truth.iter().map(|r| r.regions.len()).sum(),
        num_predictions: predictions.len(),
        rare_below: options.rare_below,
        common_below: options.common_below,
        iou_threshold: options.iou_threshold,
        per_category,
    })
}

/// Writes `report.json` and `report.txt` under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(&json_path, json).map_err(Error::io(&json_path))?;
    let txt_path = dir.join("report.txt");
    let mut f = std::fs::File::create(&txt_path).map_err(Error::io(&txt_path))?;
    f.write_all(report.to_table().as_bytes()).map_err(Error::io(&txt_path))
}
