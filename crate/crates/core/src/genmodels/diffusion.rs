//! Latent diffusion: linear ᾱ schedule, an ε-prediction network, forward
//! noising and the deterministic DDIM sampler.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, randn, LatentState, TrainingCurve};
use crate::error::{Error, Result};
use crate::nn::{self, device, Conv2d, Init, Linear, ParamStore, Scope};
use crate::weights::{self, Descriptor};

/// `ᾱ_t = 1 − (t/N)(1 − ᾱ_N)` for `t = 0..=N`, with a `K`-step DDIM
/// sub-schedule at `t_j = j·N/K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub alpha_bar_end: f64,
    pub ddim_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            alpha_bar_end: 1e-3,
            ddim_steps: 20,
        }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.ddim_steps == 0 || self.steps % self.ddim_steps != 0 {
            return Err(Error::Config(format!(
                "diffusion steps {} must be a positive multiple of the DDIM steps {}",
                self.steps, self.ddim_steps
            )));
        }
        if !(self.alpha_bar_end > 0.0 && self.alpha_bar_end <= 1.0) {
            return Err(Error::Config(format!("final alpha-bar {} outside (0, 1]", self.alpha_bar_end)));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        1.0 - (t.min(self.steps) as f64 / self.steps as f64) * (1.0 - self.alpha_bar_end)
    }

    /// Strictly increasing DDIM indices `t_1 < … < t_K = N`.
    pub fn ddim_indices(&self) -> Vec<usize> {
        let stride = self.steps / self.ddim_steps;
        (1..=self.ddim_steps).map(|j| j * stride).collect()
    }

    /// Index `t_j` of the `j`-th DDIM step (`t_0 = 0`).
    pub fn ddim_index(&self, j: usize) -> Result<usize> {
        if j > self.ddim_steps {
            return Err(Error::Config(format!("DDIM position {j} beyond {} steps", self.ddim_steps)));
        }
        Ok(j * (self.steps / self.ddim_steps))
    }

    /// Position of `t` on the DDIM sub-schedule, if it lies on it.
    pub fn ddim_position(&self, t: usize) -> Option<usize> {
        let stride = self.steps / self.ddim_steps;
        (t % stride == 0 && t <= self.steps).then_some(t / stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    temb: Linear,
}

impl ResBlock {
    fn new(s: &Scope, width: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&s.pp("conv1"), width, width, 3, 1)?,
            conv2: Conv2d::with_init(&s.pp("conv2"), width, width, 3, 1, Init::He(width * 9 * 8), true)?,
            temb: Linear::new(&s.pp("temb"), time_dim, width)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, w, _, _) = x.dims4()?;
        let h = self.conv1.forward(&nn::silu(x)?)?;
        let h = h.broadcast_add(&self.temb.forward(temb)?.reshape((b, w, 1, 1))?)?;
        let h = self.conv2.forward(&nn::silu(&h)?)?;
        Ok((x + h)?)
    }
}

/// ε-prediction network with sinusoidal timestep embedding. The trunk
/// output is read as a v-prediction and converted to ε.
#[derive(Debug, Clone)]
pub struct LatentDiffusionModel {
    pub config: DenoiserNetConfig,
    pub schedule: DiffusionSchedule,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    blocks: Vec<ResBlock>,
    conv_out: Conv2d,
    pub trained: bool,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    net: DenoiserNetConfig,
    schedule: DiffusionSchedule,
}

impl LatentDiffusionModel {
    pub(crate) fn build(store: &ParamStore, config: &DenoiserNetConfig, schedule: &DiffusionSchedule, frozen: bool) -> Result<Self> {
        schedule.validate()?;
        let s = if frozen { store.frozen_root() } else { store.root() };
        let w = config.width;
        Ok(Self {
            config: config.clone(),
            schedule: schedule.clone(),
            conv_in: Conv2d::new(&s.pp("conv_in"), config.latent_channels, w, 3, 1)?,
            time1: Linear::new(&s.pp("time1"), config.time_dim, config.time_dim)?,
            time2: Linear::new(&s.pp("time2"), config.time_dim, config.time_dim)?,
            blocks: (0..config.blocks)
                .map(|i| ResBlock::new(&s.pp(&format!("block{i}")), w, config.time_dim))
                .collect::<Result<_>>()?,
            conv_out: Conv2d::with_init(&s.pp("conv_out"), w, config.latent_channels, 3, 1, Init::Normal(1e-3), true)?,
            trained: false,
        })
    }

    pub fn from_store(store: &ParamStore, config: &DenoiserNetConfig, schedule: &DiffusionSchedule) -> Result<Self> {
        Self::build(store, config, schedule, true)
    }

    pub fn init(config: &DenoiserNetConfig, schedule: &DiffusionSchedule, seed: u64) -> Result<Self> {
        Self::build(&ParamStore::seeded(seed), config, schedule, true)
    }

    fn time_embedding(&self, ts: &[usize], dtype: DType) -> Result<Tensor> {
        let half = self.config.time_dim / 2;
        let mut v = Vec::with_capacity(ts.len() * self.config.time_dim);
        for &t in ts {
            let pos = t as f64 / self.schedule.steps as f64 * 1000.0;
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                v.push((pos * freq).sin() as f32);
            }
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                v.push((pos * freq).cos() as f32);
            }
            v.extend(std::iter::repeat_n(0f32, self.config.time_dim - 2 * half));
        }
        let e = Tensor::from_vec(v, (ts.len(), self.config.time_dim), &device())?.to_dtype(dtype)?;
        Ok(nn::silu(&self.time2.forward(&nn::silu(&self.time1.forward(&e)?)?)?)?)
    }

    /// Predicted noise for latents `z` at per-example timesteps `ts`.
    pub fn predict_eps(&self, z: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        let cfg = &self.config;
        if (c, h, w) != (cfg.latent_channels, cfg.latent_size, cfg.latent_size) {
            return Err(Error::shape(
                format!("{}×{}×{}", cfg.latent_channels, cfg.latent_size, cfg.latent_size),
                format!("{c}×{h}×{w}"),
            ));
        }
        if ts.len() != b {
            return Err(Error::shape(format!("{b} timesteps"), ts.len()));
        }
        let temb = self.time_embedding(ts, z.dtype())?;
        let mut h = self.conv_in.forward(z)?;
        for block in &self.blocks {
            h = block.forward(&h, &temb)?;
        }
        let v = self.conv_out.forward(&nn::silu(&h)?)?;
        // The trunk predicts v = √ᾱ·ε − √(1−ᾱ)·z₀; ε follows without dividing by √ᾱ.
        let coef = |f: fn(f64) -> f64| -> Result<Tensor> {
            let c: Vec<f32> = ts.iter().map(|t| f(self.schedule.alpha_bar(*t)) as f32).collect();
            Ok(Tensor::from_vec(c, (b, 1, 1, 1), &device())?.to_dtype(z.dtype())?)
        };
        let skip = coef(|a| (1.0 - a).sqrt())?;
        let out = coef(f64::sqrt)?;
        Ok((z.broadcast_mul(&skip)? + v.broadcast_mul(&out)?)?)
    }

    /// Mean and standard deviation of `p(z_{t_prev} | z_t)` under η = 0 DDIM;
    /// the deviation is always zero.
    pub fn reverse_moments(&self, z: &Tensor, t: usize, t_prev: usize) -> Result<(Tensor, f64)> {
        let b = z.dim(0)?;
        let eps = self.predict_eps(z, &vec![t; b])?;
        let (a_t, a_p) = (self.schedule.alpha_bar(t), self.schedule.alpha_bar(t_prev));
        let z0 = ((z - (&eps * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?;
        let mean = ((z0 * a_p.sqrt())? + (eps * (1.0 - a_p).sqrt())?)?;
        Ok((mean, 0.0))
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        let cfg = StoredConfig {
            net: self.config.clone(),
            schedule: self.schedule.clone(),
        };
        weights::save(path, &Descriptor::new("latent_diffusion", &cfg, self.trained)?, &store.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (desc, tensors) = weights::load(path, "latent_diffusion")?;
        let cfg: StoredConfig = desc.config_as()?;
        let store = ParamStore::from_tensors(tensors)?;
        let mut m = Self::build(&store, &cfg.net, &cfg.schedule, true)?;
        store.check_all_used()?;
        m.trained = desc.trained;
        Ok(m)
    }
}

/// `z_t = √ᾱ·z_0 + √(1−ᾱ)·ε` for an explicit ᾱ in `[0, 1]`.
pub fn diffuse_with_alpha(z0: &Tensor, alpha_bar: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Config(format!("alpha-bar {alpha_bar} outside [0, 1]")));
    }
    let eps = randn(z0.dims(), rng)?;
    Ok(((z0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

pub fn forward_diffuse(z0: &LatentState, t: usize, schedule: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Result<LatentState> {
    if t == 0 || t > schedule.steps {
        return Err(Error::Config(format!("timestep {t} outside 1..={}", schedule.steps)));
    }
    if z0.t != 0 {
        return Err(Error::Config(format!("forward diffusion expects a clean latent, got t = {}", z0.t)));
    }
    Ok(LatentState {
        z: diffuse_with_alpha(&z0.z, schedule.alpha_bar(t), rng)?,
        t,
    })
}

/// Runs `steps` deterministic DDIM updates from `state.t`, which must be the
/// `steps`-th sub-schedule index so that the trajectory ends at `t = 0`.
/// Every operation is differentiable in `state.z`.
pub fn ddim_denoise(state: &LatentState, steps: usize, model: &LatentDiffusionModel) -> Result<LatentState> {
    if steps == 0 {
        return Ok(state.clone());
    }
    let sched = &model.schedule;
    if steps > sched.ddim_steps {
        return Err(Error::Config(format!("{steps} DDIM steps requested, schedule has {}", sched.ddim_steps)));
    }
    match sched.ddim_position(state.t) {
        Some(j) if j == steps => {}
        _ => {
            return Err(Error::Config(format!(
                "timestep {} is not DDIM index {steps} (t = {})",
                state.t,
                sched.ddim_index(steps)?
            )))
        }
    }
    let mut z = state.z.clone();
    for j in (1..=steps).rev() {
        let (mean, _) = model.reverse_moments(&z, sched.ddim_index(j)?, sched.ddim_index(j - 1)?)?;
        z = mean;
    }
    Ok(LatentState { z, t: 0 })
}

/// Samples `count` clean latents from pure noise with the full DDIM schedule.
/// One random stream feeds every sample in order.
pub fn sample_latents(model: &LatentDiffusionModel, count: usize, rng: &mut ChaCha8Rng, batch: usize) -> Result<Vec<Tensor>> {
    if !model.trained {
        return Err(Error::State("diffusion model is untrained".into()));
    }
    let c = &model.config;
    let shape = (c.latent_channels, c.latent_size, c.latent_size);
    let mut out = Vec::with_capacity(count);
    let mut left = count;
    while left > 0 {
        let n = left.min(batch.max(1));
        let noise = randn((n, shape.0, shape.1, shape.2), rng)?;
        let state = LatentState {
            z: noise,
            t: model.schedule.steps,
        };
        let clean = ddim_denoise(&state, model.schedule.ddim_steps, model)?;
        for i in 0..n {
            out.push(clean.z.narrow(0, i, 1)?);
        }
        left -= n;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

pub struct TrainedDiffusion {
    pub model: LatentDiffusionModel,
    pub store: ParamStore,
    /// Training loss per step (`train`) and validation loss per epoch (`val`).
    pub curve: TrainingCurve,
    pub val_curve: TrainingCurve,
}

/// ε-prediction MSE on clean latents `(N, c, h, w)`. A fixed validation batch
/// (first up to 64 latents, fixed timesteps and noise) is scored before
/// training and after every epoch.
pub fn train_latent_diffusion(
    latents: &Tensor,
    config: &DenoiserNetConfig,
    schedule: &DiffusionSchedule,
    cfg: &DiffusionTraining,
) -> Result<TrainedDiffusion> {
    let n = latents.dim(0)?;
    if n == 0 {
        return Err(Error::Config("diffusion training set is empty".into()));
    }
    let store = ParamStore::seeded(cfg.seed);
    let model = LatentDiffusionModel::build(&store, config, schedule, false)?;
    let mut opt = nn::adam(store.all_vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ff);

    let nv = n.min(64);
    let val_z = latents.narrow(0, 0, nv)?;
    let val_t: Vec<usize> = (0..nv).map(|i| 1 + (i * schedule.steps) / nv).collect();
    let val_eps = randn(val_z.dims(), &mut rng)?;
    let val_zt = noised(&val_z, &val_t, &val_eps, schedule)?;
    let val_loss = |m: &LatentDiffusionModel| -> Result<f64> {
        nn::scalar(&(m.predict_eps(&val_zt, &val_t)?.detach() - &val_eps)?.sqr()?.mean_all()?)
    };

    let mut curve = TrainingCurve::new(&["train"]);
    let mut val_curve = TrainingCurve::new(&["val"]);
    val_curve.push(&[val_loss(&model)?]);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let idx = Tensor::from_vec(chunk.iter().map(|i| *i as u32).collect::<Vec<_>>(), chunk.len(), &device())?;
            let z0 = latents.index_select(&idx, 0)?;
            let ts: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(1..=schedule.steps)).collect();
            let eps = randn(z0.dims(), &mut rng)?;
            let zt = noised(&z0, &ts, &eps, schedule)?;
            let loss = (model.predict_eps(&zt, &ts)? - &eps)?.sqr()?.mean_all()?;
            curve.push(&[nn::scalar(&loss)?]);
            check_finite(&curve, "diffusion")?;
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
        }
        val_curve.push(&[val_loss(&model)?]);
        log::info!("diffusion epoch {}: val {:.4}", epoch + 1, val_curve.rows.last().map_or(f64::NAN, |r| r[0]));
    }
    let mut model = LatentDiffusionModel::build(&store, config, schedule, true)?;
    model.trained = true;
    Ok(TrainedDiffusion {
        model,
        store,
        curve,
        val_curve,
    })
}

fn noised(z0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let b = ts.len();
    let a: Vec<f32> = ts.iter().map(|t| schedule.alpha_bar(*t).sqrt() as f32).collect();
    let s: Vec<f32> = ts.iter().map(|t| (1.0 - schedule.alpha_bar(*t)).sqrt() as f32).collect();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), &device())?;
    let s = Tensor::from_vec(s, (b, 1, 1, 1), &device())?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> DenoiserNetConfig {
        DenoiserNetConfig {
            latent_channels: 2,
            latent_size: 4,
            width: 16,
            blocks: 2,
            time_dim: 16,
        }
    }

    #[test]
    fn schedule_shape() {
        let s = DiffusionSchedule::default();
        s.validate().unwrap();
        let idx = s.ddim_indices();
        assert_eq!(idx.len(), 20);
        assert_eq!(idx[0], 50);
        assert_eq!(*idx.last().unwrap(), 1000);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1000) - 1e-3).abs() < 1e-15);
        assert!((1..=1000).all(|t| s.alpha_bar(t) <= s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0));
        assert!(DiffusionSchedule { steps: 1000, alpha_bar_end: 1e-3, ddim_steps: 30 }.validate().is_err());
    }

    #[test]
    fn forward_diffuse_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = randn((1, 2, 4, 4), &mut rng).unwrap();
        let same = diffuse_with_alpha(&z0, 1.0, &mut rng).unwrap();
        assert_eq!(same.flatten_all().unwrap().to_vec1::<f32>().unwrap(), z0.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = diffuse_with_alpha(&z0, 0.0, &mut r1).unwrap();
        let b = diffuse_with_alpha(&(z0.clone() * 5.0).unwrap(), 0.0, &mut r2).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let s = DiffusionSchedule::default();
        let st = LatentState { z: z0, t: 0 };
        assert!(forward_diffuse(&st, 0, &s, &mut rng).is_err());
        assert!(forward_diffuse(&st, 1001, &s, &mut rng).is_err());
        assert_eq!(forward_diffuse(&st, 100, &s, &mut rng).unwrap().t, 100);
    }

    #[test]
    fn ddim_contract() {
        let m = LatentDiffusionModel::init(&tiny_net(), &DiffusionSchedule::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = randn((2, 2, 4, 4), &mut rng).unwrap();
        let s0 = LatentState { z: z.clone(), t: 70 };
        assert_eq!(ddim_denoise(&s0, 0, &m).unwrap().t, 70);
        assert!(ddim_denoise(&s0, 2, &m).is_err());
        let s = LatentState { z, t: 100 };
        assert!(ddim_denoise(&s, 1, &m).is_err());
        let a = ddim_denoise(&s, 2, &m).unwrap();
        let b = ddim_denoise(&s, 2, &m).unwrap();
        assert_eq!(a.t, 0);
        assert_eq!(a.z.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.z.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let (_, sigma) = m.reverse_moments(&s.z, 100, 50).unwrap();
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn untrained_model_cannot_sample() {
        let m = LatentDiffusionModel::init(&tiny_net(), &DiffusionSchedule::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(sample_latents(&m, 1, &mut rng, 4), Err(Error::State(_))));
    }

    #[test]
    fn training_reduces_validation_loss_and_denoises() {
        // latents with strong spatial structure: a smooth per-example field
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 96;
        let mut v = Vec::new();
        for _ in 0..n {
            let a: f32 = rng.random_range(-1.5..1.5);
            let b: f32 = rng.random_range(-1.5..1.5);
            for c in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        v.push(if c == 0 { a + 0.1 * y as f32 } else { b - 0.1 * x as f32 });
                    }
                }
            }
        }
        let lat = Tensor::from_vec(v, (n, 2, 4, 4), &device()).unwrap();
        let cfg = DiffusionTraining {
            epochs: 40,
            batch: 16,
            lr: 2e-3,
            seed: 5,
        };
        let sched = DiffusionSchedule::default();
        let t = train_latent_diffusion(&lat, &tiny_net(), &sched, &cfg).unwrap();
        let val = t.val_curve.column("val");
        assert!(val.last().unwrap() < val.first().unwrap(), "{val:?}");
        let z0 = LatentState { z: lat.narrow(0, 0, 16).unwrap(), t: 0 };
        let zt = forward_diffuse(&z0, sched.ddim_index(2).unwrap(), &sched, &mut rng).unwrap();
        let back = ddim_denoise(&zt, 2, &t.model).unwrap();
        let d = |a: &Tensor| nn::scalar(&(a - &z0.z).unwrap().sqr().unwrap().sum_all().unwrap()).unwrap();
        assert!(d(&back.z) < d(&zt.z), "{} vs {}", d(&back.z), d(&zt.z));
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let s1 = sample_latents(&t.model, 3, &mut r1, 2).unwrap();
        let s2 = sample_latents(&t.model, 3, &mut r2, 2).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParamStore::seeded(1);
        let m = LatentDiffusionModel::build(&store, &tiny_net(), &DiffusionSchedule::default(), true).unwrap();
        m.save(&dir.path().join("d.bin"), &store).unwrap();
        let l = LatentDiffusionModel::load(&dir.path().join("d.bin")).unwrap();
        let z = Tensor::ones((1, 2, 4, 4), DType::F32, &device()).unwrap();
        let a = m.predict_eps(&z, &[300]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = l.predict_eps(&z, &[300]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
