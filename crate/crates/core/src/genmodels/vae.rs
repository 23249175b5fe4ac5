//! Toy convolutional VAE with decoder feature taps at 1/2, 1/4 and 1/8
//! resolution.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Tensor, D};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, LatentState, TrainingCurve};
use crate::corpus;
use crate::error::{Error, Result};
use crate::nn::{self, upsample2x, Conv2d, Init, ParamStore, Scope};
use crate::weights::{self, Descriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_channels: usize,
    /// Width at 1/2 resolution.
    pub c1: usize,
    /// Width at 1/4 and 1/8 resolution.
    pub c2: usize,
}

impl VaeConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 8", self.image_size)));
        }
        if self.channels == 0 || self.latent_channels == 0 || self.c1 == 0 || self.c2 == 0 {
            return Err(Error::Config("VAE widths must be positive".into()));
        }
        Ok(())
    }
}

/// Convolutional trunk producing `f1, f2, f3` at 1/2, 1/4, 1/8 resolution.
#[derive(Debug, Clone)]
pub struct EncoderTrunk {
    conv_in: Conv2d,
    down: [Conv2d; 3],
}

impl EncoderTrunk {
    pub fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        Ok(Self {
            conv_in: Conv2d::new(&s.pp("conv_in"), cfg.channels, cfg.c1, 3, 1)?,
            down: [
                Conv2d::new(&s.pp("down1"), cfg.c1, cfg.c1, 3, 2)?,
                Conv2d::new(&s.pp("down2"), cfg.c1, cfg.c2, 3, 2)?,
                Conv2d::new(&s.pp("down3"), cfg.c2, cfg.c2, 3, 2)?,
            ],
        })
    }

    /// Parameters keyed `<prefix>.<layer>.<weight|bias>`.
    pub fn named_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        let layers = [("conv_in", &self.conv_in), ("down1", &self.down[0]), ("down2", &self.down[1]), ("down3", &self.down[2])];
        for (name, conv) in layers {
            insert_conv(&mut m, &format!("{prefix}.{name}"), conv);
        }
        m
    }

    pub fn features(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        let h = nn::silu(&self.conv_in.forward(x)?)?;
        let f1 = nn::silu(&self.down[0].forward(&h)?)?;
        let f2 = nn::silu(&self.down[1].forward(&f1)?)?;
        let f3 = nn::silu(&self.down[2].forward(&f2)?)?;
        Ok([f1, f2, f3])
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    trunk: EncoderTrunk,
    mid: Conv2d,
    out: Conv2d,
}

impl Encoder {
    fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        Ok(Self {
            trunk: EncoderTrunk::new(s, cfg)?,
            mid: Conv2d::new(&s.pp("mid"), cfg.c2, cfg.c2, 3, 1)?,
            out: Conv2d::with_init(&s.pp("out"), cfg.c2, 2 * cfg.latent_channels, 1, 1, Init::Normal(0.05), true)?,
        })
    }

    /// Posterior mean and log-variance.
    fn moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let [_, _, f3] = self.trunk.features(x)?;
        let h = nn::silu(&self.mid.forward(&f3)?)?;
        let m = self.out.forward(&h)?;
        let zc = m.dim(1)? / 2;
        Ok((m.narrow(1, 0, zc)?, m.narrow(1, zc, zc)?.clamp(-10f32, 5f32)?))
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv2d,
    mid: Conv2d,
    up3: Conv2d,
    up2: Conv2d,
    up1: Conv2d,
    out: Conv2d,
}

/// Decoder activations at 1/2, 1/4, 1/8 resolution, before fusion.
#[derive(Debug, Clone)]
pub struct DecoderTaps {
    pub g: [Tensor; 3],
}

impl Decoder {
    fn new(s: &Scope, cfg: &VaeConfig) -> Result<Self> {
        Ok(Self {
            conv_in: Conv2d::new(&s.pp("conv_in"), cfg.latent_channels, cfg.c2, 3, 1)?,
            mid: Conv2d::new(&s.pp("mid"), cfg.c2, cfg.c2, 3, 1)?,
            up3: Conv2d::new(&s.pp("up3"), cfg.c2, cfg.c2, 3, 1)?,
            up2: Conv2d::new(&s.pp("up2"), cfg.c2, cfg.c1, 3, 1)?,
            up1: Conv2d::new(&s.pp("up1"), cfg.c1, cfg.c1, 3, 1)?,
            out: Conv2d::new(&s.pp("out"), cfg.c1, cfg.channels, 3, 1)?,
        })
    }

    /// Unclamped output. `fusion` supplies additive terms for `g1, g2, g3`.
    fn forward(&self, z: &Tensor, fusion: Option<&[Tensor; 3]>) -> Result<(Tensor, DecoderTaps)> {
        let fuse = |i: usize, g: &Tensor| -> Result<Tensor> {
            match fusion {
                Some(f) => Ok((g + &f[i])?),
                None => Ok(g.clone()),
            }
        };
        let h = nn::silu(&self.conv_in.forward(z)?)?;
        let g3 = nn::silu(&self.mid.forward(&h)?)?;
        let h = fuse(2, &g3)?;
        let g2 = nn::silu(&self.up3.forward(&upsample2x(&h)?)?)?;
        let h = fuse(1, &g2)?;
        let g1 = nn::silu(&self.up2.forward(&upsample2x(&h)?)?)?;
        let h = fuse(0, &g1)?;
        let h = nn::silu(&self.up1.forward(&upsample2x(&h)?)?)?;
        let out = (self.out.forward(&h)? + 0.5)?;
        Ok((out, DecoderTaps { g: [g1, g2, g3] }))
    }
}

/// Encoder/decoder pair. Latents are multiplied by `latent_scale` on the way
/// out of the encoder (and divided on the way in to the decoder) so that the
/// diffusion model sees roughly unit-variance latents.
#[derive(Debug, Clone)]
pub struct VaeCodec {
    pub config: VaeConfig,
    encoder: Encoder,
    decoder: Decoder,
    pub latent_scale: f32,
    pub trained: bool,
    digest: String,
}

impl VaeCodec {
    pub(crate) fn build(store: &ParamStore, config: &VaeConfig, frozen: bool) -> Result<Self> {
        config.validate()?;
        let root = if frozen { store.frozen_root() } else { store.root() };
        let encoder = Encoder::new(&root.pp("enc"), config)?;
        let decoder = Decoder::new(&root.pp("dec"), config)?;
        let scale = root.get("latent_scale", &[1], Init::Ones)?;
        let latent_scale = scale.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?[0];
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            latent_scale,
            trained: false,
            digest: store.digest()?,
        })
    }

    /// Frozen codec over the parameters in `store`, whatever their dtype.
    pub fn from_store(store: &ParamStore, config: &VaeConfig) -> Result<Self> {
        Self::build(store, config, true)
    }

    /// Untrained codec with seeded weights.
    pub fn init(config: &VaeConfig, seed: u64) -> Result<Self> {
        Self::build(&ParamStore::seeded(seed), config, true)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Digest recomputed from the tensors this codec actually holds.
    pub fn parameter_digest(&self) -> Result<String> {
        let mut m = self.encoder.trunk.named_tensors("enc");
        insert_conv(&mut m, "enc.mid", &self.encoder.mid);
        insert_conv(&mut m, "enc.out", &self.encoder.out);
        let d = &self.decoder;
        for (name, conv) in [("conv_in", &d.conv_in), ("mid", &d.mid), ("up3", &d.up3), ("up2", &d.up2), ("up1", &d.up1), ("out", &d.out)] {
            insert_conv(&mut m, &format!("dec.{name}"), conv);
        }
        m.insert("latent_scale".into(), Tensor::new(&[self.latent_scale], &nn::device())?);
        nn::digest_tensors(&m)
    }

    pub(crate) fn encoder_trunk(&self) -> &EncoderTrunk {
        &self.encoder.trunk
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if (c, h, w) != (self.config.channels, s, s) {
            return Err(Error::shape(format!("{}×{s}×{s}", self.config.channels), format!("{c}×{h}×{w}")));
        }
        Ok(())
    }

    pub(crate) fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        let s = self.config.latent_size();
        if (c, h, w) != (self.config.latent_channels, s, s) {
            return Err(Error::shape(format!("{}×{s}×{s}", self.config.latent_channels), format!("{c}×{h}×{w}")));
        }
        Ok(())
    }

    /// Posterior-mean latent of a `(B, C, H, W)` batch.
    pub fn encode(&self, x: &Tensor) -> Result<LatentState> {
        self.check_image(x)?;
        let (mean, _) = self.encoder.moments(x)?;
        Ok(LatentState {
            z: (mean * self.latent_scale as f64)?,
            t: 0,
        })
    }

    pub fn encode_images(&self, images: &[&Array3<f32>]) -> Result<LatentState> {
        self.encode(&corpus::to_tensor(images)?)
    }

    /// Decoded image clamped to `[0, 1]`, plus the decoder taps.
    pub fn decode_with_taps(&self, z: &LatentState) -> Result<(Tensor, DecoderTaps)> {
        self.decode_fused(&z.z, None)
    }

    pub fn decode(&self, z: &LatentState) -> Result<Tensor> {
        Ok(self.decode_with_taps(z)?.0)
    }

    pub(crate) fn decode_fused(&self, z: &Tensor, fusion: Option<&[Tensor; 3]>) -> Result<(Tensor, DecoderTaps)> {
        self.check_latent(z)?;
        let (raw, taps) = self.decoder.forward(&(z / self.latent_scale as f64)?, fusion)?;
        Ok((raw.clamp(0f32, 1f32)?, taps))
    }

    fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decoder.forward(z, None)?.0)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        weights::save(path, &Descriptor::new("vae", &self.config, self.trained)?, &store.tensors())
    }

    /// Returns the codec together with its (loaded) parameter store.
    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        let (desc, tensors) = weights::load(path, "vae")?;
        let config: VaeConfig = desc.config_as()?;
        let store = ParamStore::from_tensors(tensors)?;
        let mut vae = Self::build(&store, &config, true)?;
        store.check_all_used()?;
        vae.trained = desc.trained;
        Ok((vae, store))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

/// Trained codec, its parameter store (for saving) and the loss curve.
pub struct TrainedVae {
    pub vae: VaeCodec,
    pub store: ParamStore,
    pub curve: TrainingCurve,
}

/// L1 reconstruction plus a small KL term, optimized with Adam.
pub fn train_vae(images: &[Array3<f32>], config: &VaeConfig, cfg: &VaeTraining) -> Result<TrainedVae> {
    if images.is_empty() {
        return Err(Error::Config("VAE training set is empty".into()));
    }
    let store = ParamStore::seeded(cfg.seed);
    let model = VaeCodec::build(&store, config, false)?;
    let vars: Vec<_> = store.vars_with_prefix("enc").into_iter().chain(store.vars_with_prefix("dec")).collect();
    let mut opt = nn::adam(vars, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ae);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut curve = TrainingCurve::new(&["total", "l1", "kl"]);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let x = corpus::to_tensor(&chunk.iter().map(|i| &images[*i]).collect::<Vec<_>>())?;
            let (mean, logvar) = model.encoder.moments(&x)?;
            let eps = super::randn(mean.dims(), &mut rng)?;
            let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
            let recon = model.decode_raw(&z)?;
            let l1 = (recon - &x)?.abs()?.mean_all()?;
            let kl = ((mean.sqr()? + logvar.exp()?)? - logvar)?
                .affine(0.5, -0.5)?
                .sum(D::Minus1)?
                .mean_all()?;
            let loss = (&l1 + (&kl * cfg.kl_weight)?)?;
            let values = [nn::scalar(&loss)?, nn::scalar(&l1)?, nn::scalar(&kl)?];
            curve.push(&values);
            check_finite(&curve, "VAE")?;
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
        }
        if let Some(last) = curve.rows.last() {
            log::info!("vae epoch {}: l1 {:.4}", epoch + 1, last[1]);
        }
    }
    // latent scale: inverse standard deviation of posterior means on (up to) 256 images
    let probe: Vec<&Array3<f32>> = images.iter().take(256).collect();
    let (mean, _) = model.encoder.moments(&corpus::to_tensor(&probe)?)?;
    let var = nn::scalar(&mean.sqr()?.mean_all()?)? - nn::scalar(&mean.mean_all()?)?.powi(2);
    let scale = (1.0 / var.max(1e-8).sqrt()) as f32;
    store.set("latent_scale", &Tensor::new(&[scale], &nn::device())?)?;
    let mut vae = VaeCodec::build(&store, config, true)?;
    vae.trained = true;
    Ok(TrainedVae { vae, store, curve })
}

fn insert_conv(m: &mut BTreeMap<String, Tensor>, name: &str, conv: &Conv2d) {
    m.insert(format!("{name}.weight"), conv.weight.detach());
    if let Some(b) = &conv.bias {
        m.insert(format!("{name}.bias"), b.detach());
    }
}
