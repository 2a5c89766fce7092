//! Transformer fine-tuning toolkit for 3D CT classification: volume
//! preprocessing, a reverse-mode tensor tape, ViT/Swin backbones, low-rank
//! adapters, training, metrics and experiment orchestration.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` rejects NaN too

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod lora;
pub mod metrics;
pub mod train;
pub mod volume;
pub mod zoo;

pub use autodiff::{Graph, ParamStore, Tensor};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Manifest, SplitSpec};
pub use lora::{LoraConfig, Regime};
pub use metrics::{AggregateRecord, MetricsRecord};
pub use train::{RunHistory, TrainConfig};
pub use volume::{InputImage, InputMode, PrepConfig, Volume};
pub use zoo::{Model, ModelConfig};
