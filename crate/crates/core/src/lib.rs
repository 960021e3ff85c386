//! Iterative RGBD scene completion on synthetic rooms: pinhole geometry,
//! percentile depth normalization, scale/offset registration, a small
//! conditional diffusion model with scene tokens, and the fill-align-fuse
//! loop that grows a point cloud view by view.

pub mod align;
pub mod codec;
pub mod diffusion;
pub mod embedder;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod pipeline;
pub mod synth;

use thiserror::Error;

pub use align::{fit_scale_offset, AffineFit, AlignError, FitDirection};
pub use codec::{normalize_depth, denormalize_depth, AreaCodec, CodecError, IdentityCodec, LatentCodec, NormalizedDepth};
pub use geom::{Camera, CameraParams, DepthMap, GeomError, PartialView, Pointmap, RgbImage, RgbdFrame};
pub use model::{toy_dataset, CompletionModel, ToyDatasetConfig, TrainConfig, TrainingExample};
pub use pipeline::{complete_step, complete_trajectory, FillBackend, SceneCloud};
pub use synth::{generate_scene, render_exact, SyntheticScene};

/// Any error raised by this crate, with a stable machine-readable code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error(transparent)]
    Embed(#[from] embedder::EmbedError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Checkpoint(#[from] model::CheckpointError),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Geom(e) => e.code(),
            Error::Codec(e) => e.code(),
            Error::Align(e) => e.code(),
            Error::Diffusion(e) => e.code(),
            Error::Embed(e) => e.code(),
            Error::Synth(e) => e.code(),
            Error::Pipeline(e) => e.code(),
            Error::Metrics(e) => e.code(),
            Error::Io(e) => e.code(),
            Error::Checkpoint(e) => e.code(),
        }
    }
}
