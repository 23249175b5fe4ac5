//! Latent-space adversarial stealth for generated images, at desk scale.

pub mod attacks;
pub mod config;
pub mod corpus;
pub mod detectors;
pub mod error;
pub mod evalreport;
pub mod genmodels;
pub mod nn;
pub mod pipeline;
pub mod spectral;
pub mod weights;

pub use error::{Error, Result};
