//! Generative stack: VAE codec, latent diffusion with a DDIM sampler, and the
//! Control-VAE that re-decodes latents under a spectral prior.

mod controlvae;
mod diffusion;
pub mod perceptual;
mod vae;

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{Shape, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use controlvae::{
    controlvae_decode, init_control_vae, train_control_vae, ControlTraining, ControlVaeModel, TrainedControlVae,
};
pub use diffusion::{
    ddim_denoise, diffuse_with_alpha, forward_diffuse, sample_latents, train_latent_diffusion, DenoiserNetConfig, DiffusionSchedule,
    DiffusionTraining, LatentDiffusionModel, TrainedDiffusion,
};
pub use perceptual::{perceptual_distance, perceptual_loss, FeatureExtractor};
pub use vae::{train_vae, DecoderTaps, EncoderTrunk, TrainedVae, VaeCodec, VaeConfig, VaeTraining};

use crate::error::{Error, IoContext, Result};
use crate::nn::device;

/// A batch of latents `(B, c, h, w)` at schedule index `t` (0 = clean).
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

/// Weights of the Control-VAE objective: L1, perceptual, and NPL terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeLossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CompositeLossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 10.0,
        }
    }
}

impl CompositeLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step values of one or more named loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrainingCurve {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, values: &[f64]) {
        self.rows.push(values.to_vec());
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        match self.columns.iter().position(|c| c == name) {
            Some(i) => self.rows.iter().map(|r| r[i]).collect(),
            None => Vec::new(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("step\t{}\n", self.columns.join("\t"));
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in r {
                let _ = write!(s, "\t{v:.6e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        std::fs::write(path, self.to_tsv()).at(path)
    }
}

pub(crate) fn check_finite(curve: &TrainingCurve, what: &str) -> Result<()> {
    match curve.rows.last() {
        Some(row) if row.iter().any(|v| !v.is_finite()) => Err(Error::Training {
            step: curve.rows.len(),
            message: format!("{what} loss is not finite"),
            curve: curve.column(&curve.columns[0]),
        }),
        _ => Ok(()),
    }
}

/// Standard-normal tensor drawn from `rng` in row-major order.
pub fn randn<S: Into<Shape>>(shape: S, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let shape: Shape = shape.into();
    let v: Vec<f32> = (0..shape.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &device())?)
}
