//! Binary genuine-vs-generated classifiers used as attack surrogates and as
//! held-out transfer targets. Output is the probability of "generated".

mod arch;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, ImageExample, Label};
use crate::error::{Error, IoContext, Result};
use crate::genmodels::perceptual::FeatureExtractor;
use crate::genmodels::TrainingCurve;
use crate::nn::{self, device, Init, ParamStore};
use crate::weights::{self, Descriptor};

use arch::Trunk;

/// Probabilities strictly above this are predicted generated; ties are genuine.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    ConvnetSmall,
    ConvnetDeep,
    AttentionLite,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::ConvnetSmall, Architecture::ConvnetDeep, Architecture::AttentionLite];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::ConvnetSmall => "convnet_small",
            Architecture::ConvnetDeep => "convnet_deep",
            Architecture::AttentionLite => "attention_lite",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown detector architecture `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredConfig {
    arch: Architecture,
    image_size: usize,
}

/// A trained (or freshly initialized) detector. Per-channel input
/// normalization constants are part of the parameters.
#[derive(Debug, Clone)]
pub struct SurrogateDetector {
    pub arch: Architecture,
    pub image_size: usize,
    mean: Tensor,
    std: Tensor,
    trunk: Trunk,
    pub trained: bool,
}

impl SurrogateDetector {
    fn build(store: &ParamStore, arch: Architecture, image_size: usize, frozen: bool) -> Result<Self> {
        if image_size < 8 || image_size % 8 != 0 {
            return Err(Error::Config(format!("detector image size {image_size} must be a multiple of 8")));
        }
        let root = if frozen { store.frozen_root() } else { store.root() };
        // normalization constants are never optimized: always detached
        let norm = store.frozen_root().pp("norm");
        Ok(Self {
            arch,
            image_size,
            mean: norm.get("mean", &[1, 3, 1, 1], Init::Zeros)?,
            std: norm.get("std", &[1, 3, 1, 1], Init::Ones)?,
            trunk: Trunk::new(&root.pp("net"), arch, image_size)?,
            trained: false,
        })
    }

    /// Frozen detector over the parameters in `store`, whatever their dtype.
    pub fn from_store(store: &ParamStore, arch: Architecture, image_size: usize) -> Result<Self> {
        Self::build(store, arch, image_size, true)
    }

    pub fn init(arch: Architecture, image_size: usize, seed: u64) -> Result<Self> {
        Self::build(&ParamStore::seeded(seed), arch, image_size, true)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (3, self.image_size, self.image_size) {
            return Err(Error::shape(format!("3×{0}×{0}", self.image_size), format!("{c}×{h}×{w}")));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }

    /// Logits `(B,)` for a `(B, 3, H, W)` batch in `[0, 1]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        self.trunk.logits(&self.normalize(x)?)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.dim(0)?);
        let b = x.dim(0)?;
        let mut start = 0;
        while start < b {
            let n = (b - start).min(64);
            let l = self.logits(&x.narrow(0, start, n)?)?.detach();
            out.extend(candle_nn::ops::sigmoid(&l)?.to_vec1::<f32>()?.into_iter().map(f64::from));
            start += n;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        let cfg = StoredConfig {
            arch: self.arch,
            image_size: self.image_size,
        };
        let name = format!("detector/{}", self.arch.id());
        weights::save(path, &Descriptor::new(&name, &cfg, self.trained)?, &store.tensors())
    }

    pub fn load(path: &Path, arch: Architecture) -> Result<Self> {
        let (desc, tensors) = weights::load(path, &format!("detector/{}", arch.id()))?;
        let cfg: StoredConfig = desc.config_as()?;
        let store = ParamStore::from_tensors(tensors)?;
        let mut d = Self::build(&store, cfg.arch, cfg.image_size, true)?;
        store.check_all_used()?;
        d.trained = desc.trained;
        Ok(d)
    }
}

impl FeatureExtractor for SurrogateDetector {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check(x)?;
        self.trunk.features(&self.normalize(x)?)
    }
}

/// Batched probabilities of "generated", in input order.
pub fn classify(detector: &SurrogateDetector, images: &[&Array3<f32>]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    detector.probabilities(&corpus::to_tensor(images)?)
}

pub fn predicts_generated(p: f64) -> bool {
    p > THRESHOLD
}

/// Sum over the batch of BCE losses against `y_true`, and its gradient with
/// respect to the input pixels. Examples do not interact, so each slice of
/// the gradient is that example's own gradient.
pub fn loss_and_grad(detector: &SurrogateDetector, x: &Tensor, y_true: Label) -> Result<(Tensor, Tensor)> {
    let var = Var::from_tensor(&x.detach())?;
    let loss = nn::bce_with_logits(&detector.logits(var.as_tensor())?, y_true.target())?;
    let per_example = loss.detach();
    let total = loss.sum_all()?;
    let v = nn::scalar(&total)?;
    if !v.is_finite() {
        return Err(Error::Numeric("detector loss is not finite".into()));
    }
    let grads = total.backward()?;
    let g = grads
        .get(var.as_tensor())
        .cloned()
        .unwrap_or(var.as_tensor().zeros_like()?);
    Ok((per_example, g))
}

/// Loss for one image and its gradient, shaped like the image.
pub fn loss_and_input_gradient(detector: &SurrogateDetector, image: &Array3<f32>, y_true: Label) -> Result<(f64, Array3<f32>)> {
    let (loss, g) = loss_and_grad(detector, &corpus::to_tensor(&[image])?, y_true)?;
    Ok((nn::scalar(&loss.sum_all()?)?, corpus::from_tensor(&g)?.remove(0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub accuracy: f64,
    pub accuracy_genuine: f64,
    pub accuracy_generated: f64,
    pub threshold: f64,
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl DetectorReport {
    /// Confusion counts from probabilities and labels (positive = generated).
    pub fn from_predictions(probs: &[f64], labels: &[Label]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("cannot evaluate a detector on an empty split".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::shape(labels.len(), probs.len()));
        }
        let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
        for (p, l) in probs.iter().zip(labels) {
            match (predicts_generated(*p), l) {
                (true, Label::Generated) => tp += 1,
                (false, Label::Genuine) => tn += 1,
                (true, Label::Genuine) => fp += 1,
                (false, Label::Generated) => fneg += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Ok(Self {
            accuracy: ratio(tp + tn, probs.len()),
            accuracy_genuine: ratio(tn, tn + fp),
            accuracy_generated: ratio(tp, tp + fneg),
            threshold: THRESHOLD,
            true_positive: tp,
            true_negative: tn,
            false_positive: fp,
            false_negative: fneg,
        })
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("accuracy", format!("{:.6}", self.accuracy));
        m.insert("accuracy_genuine", format!("{:.6}", self.accuracy_genuine));
        m.insert("accuracy_generated", format!("{:.6}", self.accuracy_generated));
        m.insert("threshold", format!("{}", self.threshold));
        m.insert("true_positive", self.true_positive.to_string());
        m.insert("true_negative", self.true_negative.to_string());
        m.insert("false_positive", self.false_positive.to_string());
        m.insert("false_negative", self.false_negative.to_string());
        m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).at(path)
    }
}

pub fn evaluate_detector(detector: &SurrogateDetector, examples: &[ImageExample]) -> Result<DetectorReport> {
    if examples.is_empty() {
        return Err(Error::Config("cannot evaluate a detector on an empty split".into()));
    }
    let probs = classify(detector, &examples.iter().map(|e| &e.pixels).collect::<Vec<_>>())?;
    DetectorReport::from_predictions(&probs, &examples.iter().map(|e| e.label).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

pub struct TrainedDetector {
    pub detector: SurrogateDetector,
    pub store: ParamStore,
    pub curve: TrainingCurve,
    /// Validation accuracy after each epoch.
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

/// Adam on BCE with class-balanced epochs (the minority class is cycled to
/// match the majority). The weights with the best validation accuracy are
/// kept; earlier epochs win ties.
pub fn train_detector(
    train: &[ImageExample],
    val: &[ImageExample],
    arch: Architecture,
    cfg: &DetectorTraining,
) -> Result<TrainedDetector> {
    let genuine: Vec<usize> = (0..train.len()).filter(|i| train[*i].label == Label::Genuine).collect();
    let generated: Vec<usize> = (0..train.len()).filter(|i| train[*i].label == Label::Generated).collect();
    if genuine.is_empty() || generated.is_empty() {
        return Err(Error::Config("detector training needs both genuine and generated images".into()));
    }
    let size = train[0].dims().0;
    let store = ParamStore::seeded(cfg.seed);
    let model = SurrogateDetector::build(&store, arch, size, false)?;
    let (mean, std) = channel_stats(train)?;
    store.set("norm.mean", &Tensor::from_vec(mean.to_vec(), (1, 3, 1, 1), &device())?)?;
    store.set("norm.std", &Tensor::from_vec(std.to_vec(), (1, 3, 1, 1), &device())?)?;
    let model = SurrogateDetector {
        mean: store.frozen_root().pp("norm").get("mean", &[1, 3, 1, 1], Init::Zeros)?,
        std: store.frozen_root().pp("norm").get("std", &[1, 3, 1, 1], Init::Ones)?,
        ..model
    };
    let mut opt = nn::adam(store.vars_with_prefix("net."), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xde7);
    let mut curve = TrainingCurve::new(&["bce"]);
    let mut val_accuracy = Vec::new();
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    let per_class = genuine.len().max(generated.len());
    for epoch in 0..cfg.epochs.max(1) {
        let mut order = Vec::with_capacity(2 * per_class);
        for class in [&genuine, &generated] {
            let mut pool = class.clone();
            pool.shuffle(&mut rng);
            order.extend(pool.iter().cycle().take(per_class).copied());
        }
        order.shuffle(&mut rng);
        if cfg.epochs > 0 {
            for chunk in order.chunks(cfg.batch.max(1)) {
                let batch: Vec<&Array3<f32>> = chunk.iter().map(|i| &train[*i].pixels).collect();
                let x = corpus::to_tensor(&batch)?;
                let y: Vec<f32> = chunk.iter().map(|i| train[*i].label.target()).collect();
                let y = Tensor::from_vec(y, chunk.len(), &device())?;
                let loss = nn::bce_with_logits_labels(&model.logits(&x)?, &y)?.mean_all()?;
                curve.push(&[nn::scalar(&loss)?]);
                crate::genmodels::check_finite(&curve, "detector")?;
                candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
            }
        }
        let acc = if val.is_empty() {
            0.0
        } else {
            evaluate_detector(&model, val)?.accuracy
        };
        log::info!("{arch} epoch {}: val accuracy {acc:.4}", epoch + 1);
        val_accuracy.push(acc);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, store.tensors()));
        }
    }
    let (_, best_epoch, tensors) = best.expect("at least one epoch");
    for (name, t) in &tensors {
        store.set(name, t)?;
    }
    let mut detector = SurrogateDetector::build(&store, arch, size, true)?;
    detector.trained = true;
    Ok(TrainedDetector {
        detector,
        store,
        curve,
        val_accuracy,
        best_epoch,
    })
}

fn channel_stats(images: &[ImageExample]) -> Result<([f32; 3], [f32; 3])> {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0usize;
    for e in images {
        let (h, w, c) = e.dims();
        if c != 3 {
            return Err(Error::shape("3 channels", c));
        }
        n += h * w;
        for ((_, _, ch), v) in e.pixels.indexed_iter() {
            sum[ch] += *v as f64;
            sq[ch] += (*v as f64).powi(2);
        }
    }
    let mut mean = [0f32; 3];
    let mut std = [1f32; 3];
    for ch in 0..3 {
        let m = sum[ch] / n as f64;
        mean[ch] = m as f32;
        std[ch] = ((sq[ch] / n as f64 - m * m).max(1e-6)).sqrt() as f32;
    }
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn ex(v: f32, label: Label, id: &str) -> ImageExample {
        ImageExample::new(Array3::from_elem((8, 8, 3), v), label, "t", id).unwrap()
    }

    #[test]
    fn architecture_ids_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.id().parse::<Architecture>().unwrap(), a);
        }
        assert!("resnet".parse::<Architecture>().is_err());
    }

    #[test]
    fn classify_is_per_example() {
        for arch in Architecture::ALL {
            let d = SurrogateDetector::init(arch, 16, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let a = corpus::synth_genuine(16, &mut rng);
            let b = corpus::synth_genuine(16, &mut rng);
            let pa = classify(&d, &[&a, &b, &a]).unwrap();
            assert_eq!(pa[0], pa[2], "{arch}");
            assert!(pa.iter().all(|p| (0.0..=1.0).contains(p)));
            let single = classify(&d, &[&b]).unwrap();
            assert!((single[0] - pa[1]).abs() < 1e-6, "{arch}");
            assert!(classify(&d, &[&Array3::zeros((8, 8, 3))]).is_err());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for arch in Architecture::ALL {
            let store = ParamStore::seeded(4);
            let d32 = SurrogateDetector::from_store(&store, arch, 16).unwrap();
            let d = SurrogateDetector::from_store(&store.to_dtype(DType::F64).unwrap(), arch, 16).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let img = corpus::synth_genuine(16, &mut rng);
            let x = corpus::to_tensor(&[&img]).unwrap().to_dtype(DType::F64).unwrap();
            let (_, g) = loss_and_grad(&d, &x, Label::Generated).unwrap();
            let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let (loss32, g32) = loss_and_input_gradient(&d32, &img, Label::Generated).unwrap();
            assert!(loss32.is_finite());
            assert_eq!(g32.dim(), img.dim());
            let loss_at = |x: &Tensor| {
                let l = nn::bce_with_logits(&d.logits(x).unwrap(), Label::Generated.target()).unwrap();
                l.sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let h = 1e-5;
            for k in 0..10 {
                let (c, yy, xx) = (k % 3, (k * 5) % 16, (k * 7 + 3) % 16);
                let flat = (c * 16 + yy) * 16 + xx;
                let mut bump = vec![0f64; 3 * 16 * 16];
                bump[flat] = h;
                let bump = Tensor::from_vec(bump, (1, 3, 16, 16), &device()).unwrap();
                let fd = (loss_at(&(&x + &bump).unwrap()) - loss_at(&(&x - &bump).unwrap())) / (2.0 * h);
                let an = g[flat];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(err <= 1e-2, "{arch} {flat}: fd {fd} analytic {an}");
                let single = g32[[yy, xx, c]] as f64;
                assert!((single - an).abs() <= 1e-2 * an.abs().max(1e-4), "{arch}: f32 {single} vs f64 {an}");
            }
        }
    }

    #[test]
    fn report_rules() {
        let labels = [Label::Generated, Label::Genuine, Label::Generated, Label::Genuine];
        let r = DetectorReport::from_predictions(&[0.9, 0.1, 0.8, 0.2], &labels).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let tie = DetectorReport::from_predictions(&[0.5; 4], &labels).unwrap();
        assert_eq!((tie.true_negative, tie.false_negative, tie.true_positive, tie.false_positive), (2, 2, 0, 0));
        let r = DetectorReport::from_predictions(&[0.9, 0.7, 0.3, 0.2], &labels).unwrap();
        assert_eq!((r.true_positive, r.false_positive, r.false_negative, r.true_negative), (1, 1, 1, 1));
        assert_eq!(r.total(), 4);
        assert_eq!(r.accuracy, 0.5);
        assert!(r.to_kv().contains("false_positive=1\n"));
        assert!(DetectorReport::from_predictions(&[], &[]).is_err());
    }

    #[test]
    fn separable_pair_is_learned() {
        let train = vec![ex(0.1, Label::Genuine, "a"), ex(0.9, Label::Generated, "b")];
        let cfg = DetectorTraining {
            epochs: 60,
            batch: 2,
            lr: 5e-3,
            seed: 1,
        };
        let t = train_detector(&train, &train, Architecture::ConvnetSmall, &cfg).unwrap();
        assert_eq!(evaluate_detector(&t.detector, &train).unwrap().accuracy, 1.0);
        let one_class = vec![ex(0.1, Label::Genuine, "a")];
        assert!(matches!(train_detector(&one_class, &[], Architecture::ConvnetSmall, &cfg), Err(Error::Config(_))));
        assert!(evaluate_detector(&t.detector, &[]).is_err());
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // a constant image through a detector whose first layer is zero:
        // the logit does not depend on the input at all
        let store = ParamStore::seeded(0);
        let d = SurrogateDetector::build(&store, Architecture::ConvnetSmall, 8, true).unwrap();
        for name in store.names() {
            if name.starts_with("net.") {
                let t = store.tensors()[&name].zeros_like().unwrap();
                store.set(&name, &t).unwrap();
            }
        }
        let d = SurrogateDetector::build(&store, d.arch, 8, true).unwrap();
        let (_, g) = loss_and_input_gradient(&d, &Array3::from_elem((8, 8, 3), 0.3), Label::Generated).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParamStore::seeded(3);
        let d = SurrogateDetector::build(&store, Architecture::AttentionLite, 16, true).unwrap();
        d.save(&dir.path().join("d.bin"), &store).unwrap();
        let l = SurrogateDetector::load(&dir.path().join("d.bin"), Architecture::AttentionLite).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = corpus::synth_genuine(16, &mut rng);
        assert_eq!(classify(&d, &[&img]).unwrap(), classify(&l, &[&img]).unwrap());
        assert!(SurrogateDetector::load(&dir.path().join("d.bin"), Architecture::ConvnetDeep).is_err());
    }
}
