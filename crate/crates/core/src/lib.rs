//! Self-supervised pretraining for remote-sensing imagery: scene-wide
//! matching contrastive learning with an auxiliary conditional denoising
//! objective, plus downstream evaluation tools.

pub mod ablation;
pub mod backbone;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod matching;
pub mod nn;
pub mod optim;
pub mod queue;
pub mod trainer;

pub use error::{Error, Result};
