//! Modality-separated transformer that models text autoregressively and
//! image latents by denoising diffusion inside one network.

pub mod diffusion;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
