//! Style-guided two-stage 3D generation on a rectified-flow backbone.
//!
//! Content, style and edge branches are denoised in lock-step. At every
//! self-attention site the content branch takes its style-significant
//! channels (lowest variance in the edge branch) from attention over the
//! style branch, and the remaining channels from its own self-attention.

pub mod attention;
pub mod backbone;
pub mod branch;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod export;
pub mod hooks;
pub mod insight;
pub mod pipeline;
pub mod sdfs;
pub mod sgc;
pub mod synthetic;
pub mod tensor;

pub use error::{Result, SculptError};
