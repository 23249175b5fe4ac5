//! Control-VAE: a frozen base codec whose decoder taps receive additive
//! features from a trainable copy of the encoder trunk through 1×1
//! zero-initialized convolutions, `ĝ_i = g_i + zero_conv_i(f_i)`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::perceptual::{perceptual_loss, FeatureExtractor};
use super::{check_finite, CompositeLossWeights, EncoderTrunk, LatentState, TrainingCurve, VaeCodec, VaeConfig};
use crate::corpus;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Init, ParamStore};
use crate::spectral::tensor::{npl_mean, prototype_tensor, SpectralOps};
use crate::spectral::{DenoiserFilter, NoisePrototype};
use crate::weights::{self, Descriptor};

#[derive(Debug, Clone)]
pub struct ControlVaeModel {
    pub base: VaeCodec,
    control: EncoderTrunk,
    zero_convs: [Conv2d; 3],
    base_digest: String,
    pub trained: bool,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    vae: VaeConfig,
    base_digest: String,
}

impl ControlVaeModel {
    fn build(store: &ParamStore, base: &VaeCodec, frozen: bool) -> Result<Self> {
        let root = if frozen { store.frozen_root() } else { store.root() };
        let cfg = &base.config;
        let zc = |name: &str, c: usize| Conv2d::with_init(&root.pp(name), c, c, 1, 1, Init::Zeros, true);
        Ok(Self {
            base: base.clone(),
            control: EncoderTrunk::new(&root.pp("ctrl"), cfg)?,
            zero_convs: [zc("zero1", cfg.c1)?, zc("zero2", cfg.c2)?, zc("zero3", cfg.c2)?],
            base_digest: base.parameter_digest()?,
            trained: false,
        })
    }

    /// Fusion weights and biases for `zero_conv_1..3`.
    pub fn fusion_parameters(&self) -> Vec<Tensor> {
        self.zero_convs
            .iter()
            .flat_map(|c| std::iter::once(c.weight.clone()).chain(c.bias.clone()))
            .collect()
    }

    /// Replaces one fusion weight array; used for sensitivity probes.
    pub fn with_fusion_weight(&self, i: usize, weight: Tensor) -> Result<Self> {
        let mut m = self.clone();
        let slot = m
            .zero_convs
            .get_mut(i)
            .ok_or_else(|| Error::Config(format!("fusion index {i} out of range")))?;
        if slot.weight.dims() != weight.dims() {
            return Err(Error::shape(format!("{:?}", slot.weight.dims()), format!("{:?}", weight.dims())));
        }
        slot.weight = weight;
        Ok(m)
    }

    pub fn base_digest(&self) -> &str {
        &self.base_digest
    }

    fn control_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut m = self.control.named_tensors("ctrl");
        for (i, c) in self.zero_convs.iter().enumerate() {
            m.insert(format!("zero{}.weight", i + 1), c.weight.detach());
            if let Some(b) = &c.bias {
                m.insert(format!("zero{}.bias", i + 1), b.detach());
            }
        }
        m
    }

    /// The same control branch in `dtype`, attached to `base` (which must be
    /// this model's base converted the same way).
    pub fn to_dtype(&self, base: &VaeCodec, dtype: candle_core::DType) -> Result<Self> {
        let tensors = self
            .control_tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut m = Self::build(&ParamStore::from_tensors(tensors)?, base, true)?;
        if m.base_digest != self.base_digest {
            return Err(Error::Config("converted base VAE does not match".into()));
        }
        m.trained = self.trained;
        Ok(m)
    }

    /// Saves only the control branch; the base codec is referenced by digest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = StoredConfig {
            vae: self.base.config.clone(),
            base_digest: self.base_digest.clone(),
        };
        weights::save(path, &Descriptor::new("control_vae", &cfg, self.trained)?, &self.control_tensors())
    }

    pub fn load(path: &Path, base: &VaeCodec) -> Result<Self> {
        let (desc, tensors) = weights::load(path, "control_vae")?;
        let cfg: StoredConfig = desc.config_as()?;
        if cfg.vae != base.config || cfg.base_digest != base.parameter_digest()? {
            return Err(Error::Config("Control-VAE was trained against a different base VAE".into()));
        }
        let store = ParamStore::from_tensors(tensors)?;
        let mut m = Self::build(&store, base, true)?;
        store.check_all_used()?;
        m.trained = desc.trained;
        Ok(m)
    }
}

fn init_store(base: &VaeCodec) -> Result<ParamStore> {
    let mut tensors = base.encoder_trunk().named_tensors("ctrl");
    for (i, c) in [base.config.c1, base.config.c2, base.config.c2].into_iter().enumerate() {
        tensors.insert(format!("zero{}.weight", i + 1), Tensor::zeros((c, c, 1, 1), candle_core::DType::F32, &nn::device())?);
        tensors.insert(format!("zero{}.bias", i + 1), Tensor::zeros(c, candle_core::DType::F32, &nn::device())?);
    }
    // deep copies so training never aliases the base weights
    let copied = tensors
        .into_iter()
        .map(|(k, v)| Ok((k, v.copy()?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    ParamStore::from_tensors(copied)
}

/// Control encoder copied from the base encoder, fusion convolutions zero.
pub fn init_control_vae(base: &VaeCodec) -> Result<ControlVaeModel> {
    let store = init_store(base)?;
    let m = ControlVaeModel::build(&store, base, true)?;
    store.check_all_used()?;
    Ok(m)
}

/// Decodes `z` through the frozen base decoder with control features from
/// `condition`; the output is clamped to `[0, 1]`.
pub fn controlvae_decode(z: &LatentState, condition: &Tensor, model: &ControlVaeModel) -> Result<Tensor> {
    let (b, c, h, w) = condition.dims4()?;
    let cfg = &model.base.config;
    if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size) || b != z.z.dim(0)? {
        return Err(Error::shape(
            format!("{}×{}×{}×{}", z.z.dim(0)?, cfg.channels, cfg.image_size, cfg.image_size),
            format!("{b}×{c}×{h}×{w}"),
        ));
    }
    let f = model.control.features(condition)?;
    let fusion = [
        model.zero_convs[0].forward(&f[0])?,
        model.zero_convs[1].forward(&f[1])?,
        model.zero_convs[2].forward(&f[2])?,
    ];
    Ok(model.base.decode_fused(&z.z, Some(&fusion))?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

pub struct TrainedControlVae {
    pub model: ControlVaeModel,
    /// Per step: total, l1, perceptual, npl.
    pub curve: TrainingCurve,
    /// NPL on the fixed validation batch, before training and after each epoch.
    pub val_npl: Vec<f64>,
}

/// Trains the control branch on genuine images with
/// `α·L1 + β·perceptual + γ·NPL`, conditioning on the image itself. The NPL
/// term is the batch mean of per-image Frobenius distances.
#[allow(clippy::too_many_arguments)]
pub fn train_control_vae(
    images: &[Array3<f32>],
    validation: &[Array3<f32>],
    base: &VaeCodec,
    prototype: &NoisePrototype,
    filter: &DenoiserFilter,
    weights: &CompositeLossWeights,
    perceptual_net: &dyn FeatureExtractor,
    cfg: &ControlTraining,
) -> Result<TrainedControlVae> {
    weights.validate()?;
    if prototype.filter_fingerprint != filter.fingerprint() {
        return Err(Error::Config("noise prototype was built with a different residual filter".into()));
    }
    if images.is_empty() || validation.is_empty() {
        return Err(Error::Config("Control-VAE needs non-empty training and validation images".into()));
    }
    let base_before = base.parameter_digest()?;
    let store = init_store(base)?;
    let model = ControlVaeModel::build(&store, base, false)?;
    let mut opt = nn::adam(store.all_vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc7a1);

    let size = base.config.image_size;
    let ops = SpectralOps::new(size, size)?;
    let proto = prototype_tensor(prototype)?;
    let val_x = corpus::to_tensor(&validation.iter().collect::<Vec<_>>())?;
    let val_z = base.encode(&val_x)?;
    let val_npl = |m: &ControlVaeModel| -> Result<f64> {
        let xr = controlvae_decode(&val_z, &val_x, m)?.detach();
        nn::scalar(&npl_mean(&xr, &ops, filter, &proto)?)
    };

    let mut curve = TrainingCurve::new(&["total", "l1", "perceptual", "npl"]);
    let mut vals = vec![val_npl(&model)?];
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let x = corpus::to_tensor(&chunk.iter().map(|i| &images[*i]).collect::<Vec<_>>())?;
            let z = base.encode(&x)?;
            let xr = controlvae_decode(&z, &x, &model)?;
            let l1 = (&xr - &x)?.abs()?.mean_all()?;
            let mut total = (&l1 * weights.alpha)?;
            let mut row = vec![0.0, nn::scalar(&l1)?, 0.0, 0.0];
            if weights.beta > 0.0 {
                let p = perceptual_loss(&x, &xr, perceptual_net)?;
                row[2] = nn::scalar(&p)?;
                total = (total + (p * weights.beta)?)?;
            }
            if weights.gamma > 0.0 {
                let n = npl_mean(&xr, &ops, filter, &proto)?;
                row[3] = nn::scalar(&n)?;
                total = (total + (n * weights.gamma)?)?;
            }
            row[0] = nn::scalar(&total)?;
            curve.push(&row);
            check_finite(&curve, "Control-VAE")?;
            candle_nn::Optimizer::backward_step(&mut opt, &total)?;
        }
        vals.push(val_npl(&model)?);
        log::info!("control-vae epoch {}: val npl {:.4e}", epoch + 1, vals[vals.len() - 1]);
    }
    if base.parameter_digest()? != base_before {
        return Err(Error::State("base VAE weights changed during Control-VAE training".into()));
    }
    let mut model = ControlVaeModel::build(&store, base, true)?;
    model.trained = true;
    Ok(TrainedControlVae {
        model,
        curve,
        val_npl: vals,
    })
}
