//! Diffusion inpainting steered by learnable task prompts.
//!
//! One denoiser handles context filling, object removal, captioned object
//! synthesis and shape-fitted object synthesis. The task is picked at
//! inference time purely by which trained prompt embedding conditions it.
//!
//! ```
//! use promptpaint::maskgen::{dilate, fitting_ratio, Mask};
//!
//! let mut m = Mask::empty(5, 5);
//! m.set(2, 2, true);
//! let grown = dilate(&m, 3, 1).unwrap();
//! assert_eq!(grown.area(), 9);
//! assert!((fitting_ratio(&m, &grown).unwrap() - 1.0 / 9.0).abs() < 1e-12);
//! ```

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod evaluate;
pub mod imageio;
pub mod maskgen;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod textcond;
pub mod trainer;

pub use promptpaint_autograd as autograd;
pub use promptpaint_autograd::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask: {0}")]
    Mask(String),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("request: {field}: {message}")]
    Request { field: String, message: String },
    #[error("scene placement failed after {0} attempts")]
    Placement(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite training state: {0}")]
    NonFinite(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Autograd(#[from] promptpaint_autograd::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
struct ReadmeDoctests;
