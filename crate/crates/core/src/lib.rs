pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod image;
pub mod latent;
pub mod ledger;
pub mod nn;
pub mod quantizer;

pub use error::{Error, Result};
