//! Residual-extraction filters. A filter maps an image to its denoised
//! version; the residual is what it removes.

use std::fmt;
use std::path::Path;

use candle_core::Tensor;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Init, ParamStore};
use crate::weights::{self, Descriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    FixedBlur,
    LearnedDenoiser,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::FixedBlur => "fixed_blur",
            FilterKind::LearnedDenoiser => "learned_denoiser",
        })
    }
}

#[derive(Debug, Clone)]
pub enum DenoiserFilter {
    Blur(GaussianBlur),
    Learned(LearnedDenoiser),
}

impl DenoiserFilter {
    /// The default filter: a 5×5 Gaussian with σ = 1.
    pub fn default_blur() -> Self {
        DenoiserFilter::Blur(GaussianBlur::new(5, 1.0).expect("valid default blur"))
    }

    pub fn kind(&self) -> FilterKind {
        match self {
            DenoiserFilter::Blur(_) => FilterKind::FixedBlur,
            DenoiserFilter::Learned(_) => FilterKind::LearnedDenoiser,
        }
    }

    /// Both filter kinds are built from differentiable tensor ops.
    pub fn differentiable(&self) -> bool {
        true
    }

    /// Hex SHA-256 of the filter kind and every parameter value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind().to_string().as_bytes());
        match self {
            DenoiserFilter::Blur(b) => {
                h.update((b.size as u64).to_le_bytes());
                for v in &b.kernel {
                    h.update(v.to_le_bytes());
                }
            }
            DenoiserFilter::Learned(d) => {
                h.update(d.digest.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn apply(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        match self {
            DenoiserFilter::Blur(b) => Ok(b.apply(image)),
            DenoiserFilter::Learned(d) => {
                let t = corpus::to_tensor(&[image])?;
                Ok(corpus::from_tensor(&d.denoise(&t)?)?.remove(0))
            }
        }
    }

    /// Batched `(B, C, H, W)` version of [`apply`](Self::apply); gradients flow through it.
    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            DenoiserFilter::Blur(b) => Ok(nn::depthwise_replicate(x, &b.kernel_tensor()?)?),
            DenoiserFilter::Learned(d) => d.denoise(x),
        }
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        match self {
            DenoiserFilter::Learned(d) if d.channels != channels => Err(Error::shape(
                format!("{} channels", d.channels),
                format!("{channels} channels"),
            )),
            _ => Ok(()),
        }
    }
}

/// Normalized Gaussian kernel applied per channel with edge replication.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlur {
    pub size: usize,
    pub sigma: f64,
    /// Row-major `size × size`, sums to one.
    pub kernel: Vec<f64>,
}

impl GaussianBlur {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size % 2 == 0 || size == 0 || sigma <= 0.0 {
            return Err(Error::Config(format!("blur needs an odd size and positive sigma, got {size}, {sigma}")));
        }
        let r = (size / 2) as f64;
        let mut kernel: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|v| *v /= total);
        Ok(Self { size, sigma, kernel })
    }

    /// Arbitrary kernel, normalized to unit sum.
    pub fn from_kernel(size: usize, kernel: Vec<f64>) -> Result<Self> {
        if kernel.len() != size * size || size % 2 == 0 {
            return Err(Error::shape(format!("{size}×{size} odd kernel"), kernel.len()));
        }
        let total: f64 = kernel.iter().sum();
        if total.abs() < 1e-12 {
            return Err(Error::Config("kernel sums to zero".into()));
        }
        Ok(Self {
            size,
            sigma: 0.0,
            kernel: kernel.into_iter().map(|v| v / total).collect(),
        })
    }

    pub fn apply(&self, image: &Array3<f32>) -> Array3<f32> {
        let (h, w, c) = image.dim();
        let r = (self.size / 2) as isize;
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut out = Array3::<f32>::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for ky in 0..self.size {
                        let sy = clampi(y as isize + ky as isize - r, h);
                        for kx in 0..self.size {
                            let sx = clampi(x as isize + kx as isize - r, w);
                            acc += self.kernel[ky * self.size + kx] * image[[sy, sx, ch]] as f64;
                        }
                    }
                    out[[y, x, ch]] = acc as f32;
                }
            }
        }
        out
    }

    pub fn kernel_tensor(&self) -> Result<Tensor> {
        let k: Vec<f32> = self.kernel.iter().map(|v| *v as f32).collect();
        Ok(Tensor::from_vec(k, (self.size, self.size), &nn::device())?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub width: usize,
}

/// Three bias-free convolutions predicting the noise component, in the
/// residual-learning style of DnCNN. The first layer's kernels are
/// projected to zero mean, so a constant image yields a zero prediction
/// and the filter leaves it unchanged.
#[derive(Debug, Clone)]
pub struct LearnedDenoiser {
    pub channels: usize,
    config: DenoiserConfig,
    layers: [Tensor; 3],
    digest: String,
}

impl LearnedDenoiser {
    fn build(store: &ParamStore, config: &DenoiserConfig, frozen: bool) -> Result<Self> {
        let root = if frozen { store.frozen_root() } else { store.root() };
        let c = config.channels;
        let w = config.width;
        let l0 = Conv2d::with_init(&root.pp("conv0"), c, w, 3, 1, Init::He(c * 9), false)?.weight;
        let l1 = Conv2d::with_init(&root.pp("conv1"), w, w, 3, 1, Init::He(w * 9), false)?.weight;
        let l2 = Conv2d::with_init(&root.pp("conv2"), w, c, 3, 1, Init::Normal(1e-3), false)?.weight;
        Ok(Self {
            channels: c,
            config: config.clone(),
            layers: [l0, l1, l2],
            digest: store.digest()?,
        })
    }

    /// Predicted noise (the residual) for `(B, C, H, W)` input.
    pub fn predict_noise(&self, x: &Tensor) -> Result<Tensor> {
        let k0 = &self.layers[0];
        let k0 = k0.broadcast_sub(&k0.mean_keepdim(3)?.mean_keepdim(2)?)?;
        let pad = |t: &Tensor| -> candle_core::Result<Tensor> { t.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1) };
        let h = nn::conv2d(&pad(x)?, &k0, None, 1, 0)?.relu()?;
        let h = nn::conv2d(&pad(&h)?, &self.layers[1], None, 1, 0)?.relu()?;
        Ok(nn::conv2d(&pad(&h)?, &self.layers[2], None, 1, 0)?)
    }

    pub fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x - self.predict_noise(x)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = std::collections::BTreeMap::new();
        for (i, t) in self.layers.iter().enumerate() {
            tensors.insert(format!("conv{i}.weight"), t.detach());
        }
        weights::save(path, &Descriptor::new("denoiser", &self.config, true)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (desc, tensors) = weights::load(path, "denoiser")?;
        let config: DenoiserConfig = desc.config_as()?;
        let store = ParamStore::from_tensors(tensors)?;
        let d = Self::build(&store, &config, true)?;
        store.check_all_used()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserTraining {
    pub width: usize,
    pub noise_sigma: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Fits the denoiser to predict additive Gaussian noise on clean images.
pub fn train_denoiser(images: &[Array3<f32>], cfg: &DenoiserTraining) -> Result<(LearnedDenoiser, Vec<f64>)> {
    let first = images.first().ok_or_else(|| Error::Config("denoiser training set is empty".into()))?;
    let config = DenoiserConfig {
        channels: first.dim().2,
        width: cfg.width,
    };
    let store = ParamStore::seeded(cfg.seed);
    let model = LearnedDenoiser::build(&store, &config, false)?;
    let mut opt = nn::adam(store.all_vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut curve = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let clean = corpus::to_tensor(&chunk.iter().map(|i| &images[*i]).collect::<Vec<_>>())?;
            let n: Vec<f32> = (0..clean.elem_count()).map(|_| noise.sample(&mut rng) as f32).collect();
            let n = Tensor::from_vec(n, clean.dims(), &nn::device())?;
            let pred = model.predict_noise(&(&clean + &n)?)?;
            let loss = (pred - &n)?.sqr()?.mean_all()?;
            let v = nn::scalar(&loss)?;
            curve.push(v);
            if !v.is_finite() {
                return Err(Error::Training {
                    step: curve.len(),
                    message: "denoiser loss is not finite".into(),
                    curve,
                });
            }
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
        }
    }
    let trained = LearnedDenoiser::build(&store, &config, true)?;
    Ok((trained, curve))
}
