//! Training loop, sliding-window inference and the cubic baseline.

mod baseline;
mod inference;
mod train;

pub use baseline::{baseline_interpolate, catmull_rom_weights, source_coordinate, Interpolated};
pub use inference::{
    assemble, extract_windows, infer, window_starts, Inference, InferenceSpec, InputWindow,
    TrainedModel, WindowModel,
};
pub use train::{format_trace, DataSource, LossRecord, TrainConfig, TrainState, TrainingPair};

use thiserror::Error;

use crate::model::{CheckpointError, ModelError};
use crate::tensor::TensorError;
use crate::volume::{Provenance, VolumeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step} (patches: {provenance:?})")]
    NonFiniteLoss {
        step: u64,
        provenance: Vec<Provenance>,
    },
    #[error("inference worker panicked")]
    Worker,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
