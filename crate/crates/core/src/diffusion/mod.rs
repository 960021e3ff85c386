//! RGBD latent diffusion: forward noising, condition packing, the toy
//! dual-stream denoiser and DDPM ancestral sampling.

mod condition;
mod denoiser;
mod sampler;
mod schedule;

pub use condition::*;
pub use denoiser::*;
pub use sampler::*;
pub use schedule::*;

use thiserror::Error;

use crate::embedder::EmbedError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidRange(String),
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },
    #[error("sampler state became non-finite at t={t}")]
    NonFiniteState { t: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl DiffusionError {
    pub fn code(&self) -> &'static str {
        match self {
            DiffusionError::InvalidRange(_) => "INVALID_RANGE",
            DiffusionError::StepOutOfRange { .. } => "STEP_OUT_OF_RANGE",
            DiffusionError::ShapeMismatch(_) => "SHAPE_MISMATCH",
            DiffusionError::EmptyBatch => "EMPTY_BATCH",
            DiffusionError::DivergenceDetected { .. } => "DIVERGENCE_DETECTED",
            DiffusionError::NonFiniteState { .. } => "NON_FINITE_STATE",
            DiffusionError::Embed(e) => e.code(),
        }
    }
}
