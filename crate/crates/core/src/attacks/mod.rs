//! Gradient attacks on the detectors: FGSM, PGD, the PGD preprocessing
//! stage, and latent adversarial optimization decoded through the
//! Control-VAE. Also the suite runner that attacks with one surrogate and
//! scores every detector.

pub(crate) mod spec;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{Tensor, Var};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use spec::{default_attack_specs, parse_attack_specs, AttackDefaults};

use crate::corpus::{self, ImageExample, Label};
use crate::detectors::{self, Architecture, SurrogateDetector};
use crate::error::{Error, Result};
use crate::evalreport::Outcome;
use crate::genmodels::{self, controlvae_decode, ddim_denoise, ControlVaeModel, LatentDiffusionModel, LatentState, VaeCodec};
use crate::nn;

/// L∞-bounded sign-gradient ascent on the detector loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub step: f64,
    pub iterations: usize,
}

impl PgdConfig {
    /// ε = 8/255, η = 2/255, 30 iterations.
    pub fn baseline() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step: 2.0 / 255.0,
            iterations: 30,
        }
    }

    /// ε = 4/255, η = 1/255, 10 iterations.
    pub fn preprocess() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            step: 1.0 / 255.0,
            iterations: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be non-negative", self.epsilon)));
        }
        if self.iterations > 0 && !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step {} must be positive", self.step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentAttackConfig {
    /// DDIM steps per objective evaluation (`K'`).
    pub diffusion_steps: usize,
    /// Outer gradient iterations (`T`).
    pub iterations: usize,
    /// Step length in latent units; each image's gradient is scaled to unit RMS.
    pub step_size: f64,
    pub seed: u64,
}

impl Default for LatentAttackConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 2,
            iterations: 5,
            step_size: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AttackMethod {
    /// Identity; measures clean detection.
    None,
    Fgsm { epsilon: f64 },
    Pgd(PgdConfig),
    Preprocess(PgdConfig),
    Stealth {
        preprocess: PgdConfig,
        latent: LatentAttackConfig,
        /// Decode through the Control-VAE (otherwise the base decoder).
        control: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: String,
    pub method: AttackMethod,
    pub source: Architecture,
}

/// Models needed by the latent attack.
#[derive(Clone, Copy)]
pub struct StealthModels<'a> {
    pub vae: &'a VaeCodec,
    pub diffusion: &'a LatentDiffusionModel,
    pub control: &'a ControlVaeModel,
}

impl StealthModels<'_> {
    fn check(&self) -> Result<()> {
        if self.control.base_digest() != self.vae.parameter_digest()? {
            return Err(Error::Config("Control-VAE base does not match the VAE".into()));
        }
        let lat = &self.diffusion.config;
        let v = &self.vae.config;
        if lat.latent_channels != v.latent_channels || lat.latent_size != v.latent_size() {
            return Err(Error::Config("diffusion model latent shape does not match the VAE".into()));
        }
        Ok(())
    }
}

fn sign(g: &Tensor) -> Result<Tensor> {
    Ok(g.sign()?)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    nn::scalar(&(a - b)?.abs()?.max_all()?)
}

/// Batched PGD on `(B, C, H, W)` images. Each iterate is projected onto the
/// ε-ball around the input intersected with `[0, 1]`.
pub fn pgd_tensor(x: &Tensor, detector: &SurrogateDetector, cfg: &PgdConfig) -> Result<Tensor> {
    cfg.validate()?;
    let x0 = x.detach();
    let lo = (&x0 - cfg.epsilon)?.clamp(0f32, 1f32)?;
    let hi = (&x0 + cfg.epsilon)?.clamp(0f32, 1f32)?;
    let mut xt = x0.clone();
    for _ in 0..cfg.iterations {
        let (_, g) = detectors::loss_and_grad(detector, &xt, Label::Generated)?;
        let stepped = (&xt + (sign(&g)? * cfg.step)?)?;
        xt = stepped.maximum(&lo)?.minimum(&hi)?;
        let dev = max_abs_diff(&xt, &x0)?;
        if dev > cfg.epsilon + 1e-6 {
            return Err(Error::State(format!("PGD iterate left the ε-ball: {dev}")));
        }
    }
    Ok(xt)
}

fn single<F>(image: &Array3<f32>, f: F) -> Result<Array3<f32>>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let x = corpus::to_tensor(&[image])?;
    Ok(corpus::from_tensor(&f(&x)?)?.remove(0))
}

/// `x + ε·sign(∇ₓL)`, clipped to `[0, 1]`; identical to one PGD step with η = ε.
pub fn fgsm(image: &Array3<f32>, detector: &SurrogateDetector, epsilon: f64) -> Result<Array3<f32>> {
    let cfg = PgdConfig {
        epsilon,
        step: epsilon.max(f64::MIN_POSITIVE),
        iterations: 1,
    };
    single(image, |x| pgd_tensor(x, detector, &cfg))
}

pub fn pgd(image: &Array3<f32>, detector: &SurrogateDetector, cfg: &PgdConfig) -> Result<Array3<f32>> {
    single(image, |x| pgd_tensor(x, detector, cfg))
}

pub fn pgd_preprocess(image: &Array3<f32>, surrogate: &SurrogateDetector, cfg: &PgdConfig) -> Result<Array3<f32>> {
    pgd(image, surrogate, cfg)
}

/// Output of the latent attack on a batch.
#[derive(Debug, Clone)]
pub struct LatentAttackOutput {
    pub adversarial: Tensor,
    pub preprocessed: Tensor,
    /// Mean surrogate loss (against "generated") before each update and after
    /// the last one; `T + 1` entries.
    pub loss_trace: Vec<f64>,
}

/// Decodes a noised latent through `K'` DDIM steps and the chosen decoder.
pub fn decode_chain(z: &LatentState, steps: usize, cond: &Tensor, models: &StealthModels, control: bool) -> Result<Tensor> {
    let clean = ddim_denoise(z, steps, models.diffusion)?;
    if control {
        controlvae_decode(&clean, cond, models.control)
    } else {
        models.vae.decode(&clean)
    }
}

/// Preprocess with PGD, encode, noise to the `K'`-th DDIM index with one
/// seeded stream per image, then take `T` normalized gradient-ascent steps
/// on the noised latent to maximize the surrogate's loss against the
/// "generated" label. Returns the final decode clamped to `[0, 1]`.
pub fn latent_adversarial_optimize_batch(
    x: &Tensor,
    seeds: &[u64],
    surrogate: &SurrogateDetector,
    models: &StealthModels,
    preprocess: &PgdConfig,
    cfg: &LatentAttackConfig,
    control: bool,
) -> Result<LatentAttackOutput> {
    models.check()?;
    let b = x.dim(0)?;
    if seeds.len() != b {
        return Err(Error::shape(format!("{b} seeds"), seeds.len()));
    }
    let x_pre = pgd_tensor(x, surrogate, preprocess)?;
    let z0 = models.vae.encode(&x_pre)?;
    let sched = &models.diffusion.schedule;
    let t = sched.ddim_index(cfg.diffusion_steps)?;
    let z_n = if t == 0 {
        z0.z.clone()
    } else {
        let mut parts = Vec::with_capacity(b);
        for (i, seed) in seeds.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let zi = LatentState {
                z: z0.z.narrow(0, i, 1)?,
                t: 0,
            };
            parts.push(genmodels::forward_diffuse(&zi, t, sched, &mut rng)?.z);
        }
        Tensor::cat(&parts, 0)?
    };
    let var = Var::from_tensor(&z_n)?;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let state = LatentState {
            z: var.as_tensor().clone(),
            t,
        };
        let img = decode_chain(&state, cfg.diffusion_steps, &x_pre, models, control)?;
        let per = nn::bce_with_logits(&surrogate.logits(&img)?, Label::Generated.target())?;
        let total = per.sum_all()?;
        let v = nn::scalar(&total)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("latent attack loss is not finite after {} steps: {trace:?}", trace.len())));
        }
        trace.push(v / b as f64);
        let grads = total.backward()?;
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.clone(),
            None => break,
        };
        let rms = g.sqr()?.flatten_from(1)?.mean(1)?.sqrt()?;
        let rms = (rms.maximum(1e-12)?).reshape((b, 1, 1, 1))?;
        let step = g.broadcast_div(&rms)?.affine(cfg.step_size, 0.0)?;
        var.set(&(var.as_tensor() + step)?)?;
    }
    let state = LatentState {
        z: var.as_tensor().detach(),
        t,
    };
    let adversarial = decode_chain(&state, cfg.diffusion_steps, &x_pre, models, control)?.detach();
    let per = nn::bce_with_logits(&surrogate.logits(&adversarial)?, Label::Generated.target())?;
    trace.push(nn::scalar(&per.mean_all()?)?);
    Ok(LatentAttackOutput {
        adversarial,
        preprocessed: x_pre,
        loss_trace: trace,
    })
}

/// Single-image latent attack.
pub fn latent_adversarial_optimize(
    image: &ImageExample,
    surrogate: &SurrogateDetector,
    models: &StealthModels,
    preprocess: &PgdConfig,
    cfg: &LatentAttackConfig,
) -> Result<(Array3<f32>, Vec<f64>)> {
    let x = corpus::to_tensor(&[&image.pixels])?;
    let seed = image_seed(cfg.seed, "stealth", &image.id);
    let out = latent_adversarial_optimize_batch(&x, &[seed], surrogate, models, preprocess, cfg, true)?;
    Ok((corpus::from_tensor(&out.adversarial)?.remove(0), out.loss_trace))
}

/// Per-image seed derived from the run seed, the attack name and the image id,
/// so results do not depend on batch composition.
pub fn image_seed(seed: u64, attack: &str, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(attack.as_bytes());
    h.update([0]);
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Applies one attack to a batch; adversarial pixels are quantized to the
/// 8-bit grid they are stored on.
fn attack_batch(
    spec: &AttackSpec,
    images: &[&ImageExample],
    surrogate: &SurrogateDetector,
    models: Option<&StealthModels>,
    seed: u64,
) -> Result<Vec<Array3<f32>>> {
    let x = corpus::to_tensor(&images.iter().map(|e| &e.pixels).collect::<Vec<_>>())?;
    let adv = match &spec.method {
        AttackMethod::None => x,
        AttackMethod::Fgsm { epsilon } => pgd_tensor(
            &x,
            surrogate,
            &PgdConfig {
                epsilon: *epsilon,
                step: epsilon.max(f64::MIN_POSITIVE),
                iterations: 1,
            },
        )?,
        AttackMethod::Pgd(cfg) | AttackMethod::Preprocess(cfg) => pgd_tensor(&x, surrogate, cfg)?,
        AttackMethod::Stealth {
            preprocess,
            latent,
            control,
        } => {
            let models = models.ok_or_else(|| Error::State("latent attack needs the generative models".into()))?;
            let seeds: Vec<u64> = images.iter().map(|e| image_seed(seed ^ latent.seed, &spec.name, &e.id)).collect();
            latent_adversarial_optimize_batch(&x, &seeds, surrogate, models, preprocess, latent, *control)?.adversarial
        }
    };
    Ok(corpus::from_tensor(&adv)?.iter().map(corpus::quantize).collect())
}

/// One image's result under one attack.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub id: String,
    pub original: Array3<f32>,
    pub adversarial: Array3<f32>,
    /// Keyed by target detector id.
    pub scores: BTreeMap<String, Outcome>,
    pub error: Option<String>,
}

impl ImageResult {
    /// Whether `target` classifies the adversarial image as genuine.
    pub fn success(&self, target: &str) -> Option<bool> {
        self.scores.get(target).map(|o| !detectors::predicts_generated(o.post))
    }
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub spec: AttackSpec,
    pub outcomes: Vec<ImageResult>,
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteResult {
    pub runs: Vec<AttackRun>,
    /// Target detector ids, in evaluation order.
    pub targets: Vec<String>,
}

pub struct SuiteOptions<'a> {
    pub batch: usize,
    pub seed: u64,
    /// When set, adversarial PNGs go to `<dir>/<attack>/<surrogate>/<id>.png`.
    pub output_dir: Option<&'a Path>,
}

/// Runs every spec with its source surrogate and scores all `detectors` on
/// the clean and adversarial images. Per-image failures are recorded and
/// the suite continues.
pub fn run_attack_suite(
    images: &[ImageExample],
    specs: &[AttackSpec],
    detectors: &BTreeMap<Architecture, SurrogateDetector>,
    models: Option<&StealthModels>,
    opts: &SuiteOptions,
) -> Result<SuiteResult> {
    let targets: Vec<String> = detectors.keys().map(|a| a.id().to_string()).collect();
    if specs.is_empty() {
        return Ok(SuiteResult { runs: Vec::new(), targets });
    }
    if images.is_empty() {
        return Err(Error::Config("attack suite needs at least one image".into()));
    }
    let mut clean: BTreeMap<Architecture, Vec<f64>> = BTreeMap::new();
    for (arch, det) in detectors {
        clean.insert(*arch, detectors::classify(det, &images.iter().map(|e| &e.pixels).collect::<Vec<_>>())?);
    }
    let mut runs = Vec::with_capacity(specs.len());
    for spec in specs {
        let start = Instant::now();
        log::info!("attack {} with surrogate {} on {} images", spec.name, spec.source, images.len());
        let mut adversarial: Vec<std::result::Result<Array3<f32>, String>> = Vec::with_capacity(images.len());
        match detectors.get(&spec.source) {
            None => {
                let msg = format!("surrogate {} is not available", spec.source);
                adversarial.extend(images.iter().map(|_| Err(msg.clone())));
            }
            Some(surrogate) => {
                for chunk in images.chunks(opts.batch.max(1)) {
                    let refs: Vec<&ImageExample> = chunk.iter().collect();
                    match attack_batch(spec, &refs, surrogate, models, opts.seed) {
                        Ok(out) => adversarial.extend(out.into_iter().map(Ok)),
                        Err(_) => {
                            // isolate the failing images
                            for e in chunk {
                                adversarial.push(
                                    attack_batch(spec, &[e], surrogate, models, opts.seed)
                                        .map(|mut v| v.remove(0))
                                        .map_err(|err| err.to_string()),
                                );
                            }
                        }
                    }
                }
            }
        }
        let ok: Vec<&Array3<f32>> = adversarial.iter().filter_map(|r| r.as_ref().ok()).collect();
        let mut post: BTreeMap<Architecture, Vec<f64>> = BTreeMap::new();
        for (arch, det) in detectors {
            post.insert(*arch, detectors::classify(det, &ok)?);
        }
        let mut outcomes = Vec::with_capacity(images.len());
        let mut k = 0;
        for (i, (img, adv)) in images.iter().zip(adversarial).enumerate() {
            let (adv, error, scores) = match adv {
                Ok(a) => {
                    let scores = detectors
                        .keys()
                        .map(|arch| {
                            (
                                arch.id().to_string(),
                                Outcome {
                                    pre: clean[arch][i],
                                    post: post[arch][k],
                                },
                            )
                        })
                        .collect();
                    k += 1;
                    (a, None, scores)
                }
                Err(e) => (img.pixels.clone(), Some(e), BTreeMap::new()),
            };
            if let (Some(dir), None) = (opts.output_dir, &error) {
                let path = dir.join(&spec.name).join(spec.source.id()).join(format!("{}.png", img.id));
                corpus::save_png(&adv, &path)?;
            }
            outcomes.push(ImageResult {
                id: img.id.clone(),
                original: img.pixels.clone(),
                adversarial: adv,
                scores,
                error,
            });
        }
        runs.push(AttackRun {
            spec: spec.clone(),
            outcomes,
            seed: opts.seed,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(SuiteResult { runs, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det() -> SurrogateDetector {
        SurrogateDetector::init(Architecture::ConvnetSmall, 16, 7).unwrap()
    }

    fn img(seed: u64) -> Array3<f32> {
        corpus::synth_genuine(16, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn linf(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_budget_and_zero_iterations_are_identity() {
        let d = det();
        let x = img(1);
        assert_eq!(fgsm(&x, &d, 0.0).unwrap(), x);
        let cfg = PgdConfig {
            iterations: 0,
            ..PgdConfig::baseline()
        };
        assert_eq!(pgd(&x, &d, &cfg).unwrap(), x);
    }

    #[test]
    fn fgsm_equals_single_pgd_step() {
        let d = det();
        let x = img(2);
        let eps = 8.0 / 255.0;
        let cfg = PgdConfig {
            epsilon: eps,
            step: eps,
            iterations: 1,
        };
        assert_eq!(fgsm(&x, &d, eps).unwrap(), pgd(&x, &d, &cfg).unwrap());
    }

    #[test]
    fn budgets_hold() {
        let d = det();
        for seed in 0..3 {
            let x = img(10 + seed);
            for cfg in [PgdConfig::baseline(), PgdConfig::preprocess()] {
                let a = pgd(&x, &d, &cfg).unwrap();
                assert!(linf(&a, &x) <= cfg.epsilon + 1e-6);
                assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let f = fgsm(&x, &d, 8.0 / 255.0).unwrap();
            assert!(linf(&f, &x) <= 8.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn preprocess_raises_surrogate_loss() {
        let d = det();
        let x = img(4);
        let before = detectors::loss_and_input_gradient(&d, &x, Label::Generated).unwrap().0;
        let a = pgd_preprocess(&x, &d, &PgdConfig::preprocess()).unwrap();
        let after = detectors::loss_and_input_gradient(&d, &a, Label::Generated).unwrap().0;
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn image_seed_is_stable_and_distinct() {
        assert_eq!(image_seed(1, "a", "x"), image_seed(1, "a", "x"));
        assert_ne!(image_seed(1, "a", "x"), image_seed(1, "a", "y"));
        assert_ne!(image_seed(1, "ab", "x"), image_seed(1, "a", "bx"));
    }

    #[test]
    fn empty_spec_list_is_empty_result() {
        let mut dets = BTreeMap::new();
        dets.insert(Architecture::ConvnetSmall, det());
        let opts = SuiteOptions {
            batch: 4,
            seed: 0,
            output_dir: None,
        };
        let r = run_attack_suite(&[], &[], &dets, None, &opts).unwrap();
        assert!(r.runs.is_empty());
        assert_eq!(r.targets, vec!["convnet_small".to_string()]);
    }

    #[test]
    fn identity_attack_success_is_clean_miss() {
        let d = det();
        let mut dets = BTreeMap::new();
        dets.insert(Architecture::ConvnetSmall, d.clone());
        let e = ImageExample::new(img(5), Label::Generated, "t", "a").unwrap();
        let spec = AttackSpec {
            name: "none".into(),
            method: AttackMethod::None,
            source: Architecture::ConvnetSmall,
        };
        let opts = SuiteOptions {
            batch: 4,
            seed: 0,
            output_dir: None,
        };
        let r = run_attack_suite(std::slice::from_ref(&e), &[spec], &dets, None, &opts).unwrap();
        let p = detectors::classify(&d, &[&e.pixels]).unwrap()[0];
        assert_eq!(r.runs[0].outcomes[0].success("convnet_small"), Some(!detectors::predicts_generated(p)));
    }

    #[test]
    fn missing_models_are_recorded_per_image() {
        let mut dets = BTreeMap::new();
        dets.insert(Architecture::ConvnetSmall, det());
        let e = ImageExample::new(img(6), Label::Generated, "t", "a").unwrap();
        let spec = AttackSpec {
            name: "stealth".into(),
            method: AttackMethod::Stealth {
                preprocess: PgdConfig::preprocess(),
                latent: LatentAttackConfig::default(),
                control: true,
            },
            source: Architecture::ConvnetSmall,
        };
        let missing = AttackSpec {
            name: "pgd".into(),
            method: AttackMethod::Pgd(PgdConfig::baseline()),
            source: Architecture::ConvnetDeep,
        };
        let opts = SuiteOptions {
            batch: 4,
            seed: 0,
            output_dir: None,
        };
        let r = run_attack_suite(std::slice::from_ref(&e), &[spec, missing], &dets, None, &opts).unwrap();
        assert!(r.runs.iter().all(|run| run.outcomes[0].error.is_some()));
    }
}
