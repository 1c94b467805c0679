//! Noise schedules, the x₀-prediction objective, Adam and the ancestral sampler.

mod adam;
mod sample;
mod schedule;
mod train;

pub use adam::{optimizer_step, AdamState};
pub use sample::{p_sample_loop, SamplerConfig};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use train::{
    batch_loss, draw_for, prepare_examples, reconstruction_loss, training_step, LossPath, StepDraw, StepOutput, StepReport,
    TrainConfig, Trainer, TrainingExample,
};

use crate::keyframes::KeyframeError;
use crate::model::ModelError;
use crate::motion::MotionError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffusionError {
    #[error("diffusion needs at least one step, got {0}")]
    NoSteps(usize),
    #[error("step {t} outside [1, {steps}]")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("noise shape {noise:?} differs from sample shape {sample:?}")]
    NoiseShape { noise: Vec<usize>, sample: Vec<usize> },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Keyframe(#[from] KeyframeError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

impl From<TensorError> for DiffusionError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(what) => Self::NonFinite(what),
            other => Self::Model(ModelError::Tensor(other)),
        }
    }
}

pub type Result<T> = std::result::Result<T, DiffusionError>;
