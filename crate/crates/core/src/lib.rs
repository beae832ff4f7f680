pub mod align;
pub mod augment;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod image;
pub mod inject;
#[cfg(feature = "judge")]
pub mod judge;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod schedule;

pub use error::{AsukaError, Result};
pub use image::Image;
