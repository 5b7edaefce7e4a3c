//! Checkpoints: configs and counters in the JSON header, every trainable
//! tensor and the optimizer moments as float32 arrays.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::config::{PromptConfig, TrainConfig};
use crate::container::ArrayContainer;
use crate::encoders::EncoderSpec;
use crate::fusion::FusionConfig;
use crate::model::ModelParameters;
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::{assign_from, checksum, to_owned, Tensors};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";
const OPTIM_M: &str = "optim.m";
const OPTIM_V: &str = "optim.v";

/// Where the batch sampler stands, so training could resume mid-epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub epoch: u64,
    /// Next batch index within `epoch`.
    pub cursor: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    encoder: EncoderSpec,
    fusion: FusionConfig,
    alignment: AlignmentConfig,
    prompt: PromptConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    iteration: u64,
    stage: usize,
    rng: SamplerState,
    parameter_checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderSpec,
    pub fusion: FusionConfig,
    pub alignment: AlignmentConfig,
    pub prompt: PromptConfig,
    pub train: Option<TrainConfig>,
    pub params: ModelParameters<f32>,
    pub optimizer_config: AdamWConfig,
    pub optimizer: AdamWState<ModelParameters<f32>>,
    /// Global iterations completed.
    pub iteration: u64,
    pub stage: usize,
    pub rng: SamplerState,
}

impl Checkpoint {
    /// A fresh checkpoint with seeded parameters and zeroed optimizer state.
    pub fn initial(
        encoder: &EncoderSpec,
        fusion: &FusionConfig,
        alignment: &AlignmentConfig,
        prompt: &PromptConfig,
        train: Option<&TrainConfig>,
        seed: u64,
    ) -> Result<Self> {
        encoder.validate()?;
        fusion.validate()?;
        let params = ModelParameters::init(fusion, alignment, encoder.d_loc, encoder.d_vil, seed)?;
        Ok(Checkpoint {
            encoder: encoder.clone(),
            fusion: fusion.clone(),
            alignment: alignment.clone(),
            prompt: prompt.clone(),
            train: train.cloned(),
            optimizer_config: train.map(|t| t.optimizer.clone()).unwrap_or_default(),
            optimizer: AdamWState::new(&params),
            params,
            iteration: 0,
            stage: 0,
            rng: SamplerState {
                seed,
                ..SamplerState::default()
            },
        })
    }

    pub fn parameter_checksum(&self) -> String {
        checksum(&self.params)
    }

    pub fn to_container(&self) -> Result<ArrayContainer> {
        let header = Header {
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            alignment: self.alignment.clone(),
            prompt: self.prompt.clone(),
            train: self.train.clone(),
            optimizer: self.optimizer_config.clone(),
            optimizer_step: self.optimizer.step,
            iteration: self.iteration,
            stage: self.stage,
            rng: self.rng,
            parameter_checksum: self.parameter_checksum(),
        };
        let mut c = ArrayContainer::new(CHECKPOINT_KIND, serde_json::to_value(header)?);
        for (name, arr) in to_owned(&self.params) {
            c.push(name, arr);
        }
        for (prefix, state) in [(OPTIM_M, &self.optimizer.m), (OPTIM_V, &self.optimizer.v)] {
            for (name, arr) in state.named() {
                c.push(format!("{prefix}.{name}"), arr.to_owned());
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &ArrayContainer, path: &Path) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("expected a {CHECKPOINT_KIND} container, found {:?}", c.kind),
            });
        }
        let header: Header = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("checkpoint header: {e}"),
        })?;
        let mut params = ModelParameters::zeros(&header.fusion, header.encoder.d_loc, header.encoder.d_vil);
        restore(&mut params, c, "")?;
        let mut optimizer = AdamWState::new(&params);
        optimizer.step = header.optimizer_step;
        restore(&mut optimizer.m, c, OPTIM_M)?;
        restore(&mut optimizer.v, c, OPTIM_V)?;
        let ckpt = Checkpoint {
            encoder: header.encoder,
            fusion: header.fusion,
            alignment: header.alignment,
            prompt: header.prompt,
            train: header.train,
            params,
            optimizer_config: header.optimizer,
            optimizer,
            iteration: header.iteration,
            stage: header.stage,
            rng: header.rng,
        };
        if ckpt.parameter_checksum() != header.parameter_checksum {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: "parameter checksum does not match the header".into(),
            });
        }
        Ok(ckpt)
    }

    /// Copies the stored head parameters into `target`, which must have been
    /// built for the same architecture. Nothing is written on mismatch.
    pub fn restore_into(&self, target: &mut ModelParameters<f32>) -> Result<()> {
        assign_from(target, &to_owned(&self.params))
    }
}

/// Fills `dst` from the container arrays named `{prefix}.{name}`; validates
/// the whole set before writing anything.
fn restore(dst: &mut ModelParameters<f32>, c: &ArrayContainer, prefix: &str) -> Result<()> {
    let names: Vec<String> = dst.named().into_iter().map(|(n, _)| n).collect();
    let mut src: Vec<(String, ArrayD<f32>)> = Vec::with_capacity(names.len());
    for name in names {
        let key = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        let arr = c
            .get(&key)
            .ok_or_else(|| Error::shape("checkpoint arrays", key.clone(), "missing"))?;
        src.push((name, arr.clone()));
    }
    assign_from(dst, &src)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_container()?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(&ArrayContainer::read(path)?, path)
}
