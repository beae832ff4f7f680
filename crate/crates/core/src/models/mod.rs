//! Desk-scale backbones: MAE, autoencoder and latent denoiser.

pub mod corpus;
pub mod denoiser;
pub mod mae;
pub mod vae;

pub use denoiser::{BaseGenerator, CondMode, DenoiseInput, DenoiserConfig, ToyDenoiser};
pub use mae::{Mae, MaeConfig, MaePrior, PriorSource};
pub use vae::{Vae, VaeConfig};
