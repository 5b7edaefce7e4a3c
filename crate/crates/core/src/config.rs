//! Run configuration: one JSON document, optionally layered over a preset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::encoders::{validate_template, EncoderSpec, TokenTap, DEFAULT_TEMPLATE};
use crate::evaluator::EvalMode;
use crate::fusion::FusionConfig;
use crate::optim::AdamWConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub token_tap: TokenTap,
    pub template: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            token_tap: TokenTap::TransformerDecoder,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Ids into [`RunConfig::datasets`].
    pub datasets: Vec<String>,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
    pub base_lr: f64,
    /// Iteration indices, relative to the start of each stage.
    pub lr_decay_points: Vec<u64>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Checkpoint + evaluation interval in global iterations; 0 disables.
    pub eval_every: u64,
    /// Random background boxes added per image with all-negative targets.
    pub negative_boxes_per_image: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: vec![StageConfig {
                datasets: vec!["train".into()],
                iterations: 450_000,
            }],
            base_lr: 2.5e-5,
            lr_decay_points: vec![350_000, 420_000],
            decay_factor: 0.1,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            eval_every: 0,
            negative_boxes_per_image: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, datasets: &BTreeMap<String, PathBuf>) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("train.stages", "at least one stage is required"));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.datasets.is_empty() {
                return Err(Error::config(
                    format!("train.stages[{s}].datasets"),
                    "empty dataset list",
                ));
            }
            for id in &stage.datasets {
                if !datasets.contains_key(id) {
                    return Err(Error::config(
                        format!("train.stages[{s}].datasets"),
                        format!("unknown dataset id {id:?}"),
                    ));
                }
            }
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("train.decay_factor", "must lie in (0, 1]"));
        }
        if self.lr_decay_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("train.lr_decay_points", "must be strictly increasing"));
        }
        if let Some(&last) = self.lr_decay_points.last() {
            for (s, stage) in self.stages.iter().enumerate() {
                if stage.iterations > 0 && last >= stage.iterations {
                    return Err(Error::config(
                        "train.lr_decay_points",
                        format!("point {last} is not below stage {s}'s {} iterations", stage.iterations),
                    ));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::config(
                "train.optimizer",
                "betas in [0, 1), eps > 0, weight_decay >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub top_k: usize,
    pub iou_threshold: f64,
    /// Categories with fewer training instances are "rare".
    pub rare_below: u64,
    /// Categories with fewer training instances (and not rare) are "common".
    pub common_below: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::FixedBox,
            top_k: 5,
            iou_threshold: 0.5,
            rare_below: 10,
            common_below: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::config("eval.top_k", "must be positive"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config("eval.iou_threshold", "must lie in (0, 1]"));
        }
        if self.rare_below > self.common_below {
            return Err(Error::config("eval.rare_below", "must not exceed common_below"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub encoder: EncoderSpec,
    pub fusion: FusionConfig,
    pub alignment: AlignmentConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Dataset id to COCO-style annotation file.
    pub datasets: BTreeMap<String, PathBuf>,
}

pub const PRESETS: [&str; 2] = ["lite-toy", "pro-toy"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("lite-toy").expect("built-in preset")
    }
}

impl RunConfig {
    /// Desk-scale analogues of the Lite (base/base) and Pro (base/large)
    /// variants: same localization width, wider vision-language space for Pro.
    pub fn preset(name: &str) -> Result<Self> {
        let (d_vil, encoder_name) = match name {
            "lite-toy" => (128, "lite-toy"),
            "pro-toy" => (256, "pro-toy"),
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset {other:?} (known: {})", PRESETS.join(", ")),
                ))
            }
        };
        let stage = |iterations| StageConfig {
            datasets: vec!["train".into()],
            iterations,
        };
        Ok(RunConfig {
            preset: Some(name.to_string()),
            encoder: EncoderSpec {
                name: encoder_name.to_string(),
                d_loc: 64,
                d_vil,
                patch_size: 32,
                input_resolution: 224,
                frozen: true,
                seed: 0,
            },
            fusion: FusionConfig {
                c_dim: d_vil,
                ..FusionConfig::default()
            },
            alignment: AlignmentConfig::default(),
            prompt: PromptConfig::default(),
            train: TrainConfig {
                stages: vec![stage(2000), stage(2000)],
                base_lr: 1e-3,
                lr_decay_points: vec![1400, 1800],
                batch_size: 4,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            datasets: BTreeMap::new(),
        })
    }

    /// Parses a config document. When it names a `preset`, its fields are
    /// deep-merged over that preset; otherwise over the default (`lite-toy`).
    /// Relative dataset paths resolve against `base_dir`. Unknown keys are
    /// rejected.
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self> {
        let doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        if !doc.is_object() {
            return Err(Error::config("<document>", "config must be a JSON object"));
        }
        let preset = match doc.get("preset") {
            None => None,
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(Error::config("preset", "must be a string")),
        };
        let base = match &preset {
            Some(name) => Self::preset(name)?,
            None => RunConfig {
                preset: None,
                ..Self::default()
            },
        };
        let mut merged = serde_json::to_value(&base)?;
        merge_json(&mut merged, &doc);
        let mut cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| Error::config("<document>", e.to_string()))?;
        for path in cfg.datasets.values_mut() {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.alignment.validate()?;
        validate_template(&self.prompt.template)
            .map_err(|_| Error::config("prompt.template", "needs exactly one `{}` placeholder"))?;
        if self.fusion.c_dim != self.encoder.d_vil {
            return Err(Error::config(
                "fusion.c_dim",
                format!(
                    "must equal encoder.d_vil ({}) so region tokens live in the text embedding space",
                    self.encoder.d_vil
                ),
            ));
        }
        self.train.validate(&self.datasets)?;
        self.eval.validate()
    }
}

fn merge_json(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
