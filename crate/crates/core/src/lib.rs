//! Single-image inversion of a latent-conditioned radiance-field generator:
//! a differentiable tensor core, a volume renderer, an analytic synthetic
//! world, the generator, the inversion/fine-tuning objectives, the pipeline
//! that trains and fine-tunes, and evaluation metrics.

pub mod error;
pub mod generator;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod numcore;
pub mod renderer;
pub mod synthworld;

pub use error::{Error, Result};
pub use generator::{broadcast_latent, Generator, GeneratorConfig, LatentCode, LatentMode};
pub use renderer::{CameraPose, RenderedImage, Resolution};
pub use synthworld::{ExpressionParams, IdentityParams};
