//! Phantom data, conditional latent diffusion and segmentation evaluation
//! for synthetic brain ventricle images.

pub mod blocks;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod seg;
pub mod train;

pub use error::{Error, Result};
