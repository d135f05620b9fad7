//! Score-based diffusion in pixel and latent space for images with missing
//! data: MCAR masking, masked training objectives, a KL-regularized VAE,
//! imputation by replacement / self-guidance / EM retraining, and
//! classifier-feature evaluation metrics.

pub mod ckpt;
pub mod data;
pub mod error;
pub mod eval;
pub mod impute;
pub mod net;
pub mod oracle;
pub mod score;
pub mod sde;
pub mod vae;

pub use error::{Error, Result};
