//! Open-vocabulary region recognition over frozen backbones.
//!
//! Per-region position-aware tokens from a frozen localization encoder are
//! fused with the image-level feature map of a frozen vision-language encoder
//! by a small trainable attention stack. The resulting region tokens are
//! scored against text embeddings of prompted category names.
//!
//! Module map:
//!
//! - [`encoders`]: frozen backbone contracts and seeded toy backbones.
//! - [`fusion`]: the trainable projector + attention block stack.
//! - [`alignment`]: region-text matching scores, focal loss, label ranking.
//! - [`datasets`]: COCO-style ingestion, label spaces, batching.
//! - [`trainer`]: AdamW training over the frozen backbones, checkpoints.
//! - [`evaluator`]: zero-shot inference, recognition AP, attention export.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
pub use ops::Real;
