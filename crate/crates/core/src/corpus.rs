//! Image corpora: procedural "genuine" textures, generator samples, the
//! tab-separated manifest that indexes them, and PNG I/O.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Tensor;
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::genmodels::{sample_latents, LatentDiffusionModel, LatentState, VaeCodec};
use crate::nn::device;
use crate::spectral::fft2d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Generated,
}

impl Label {
    /// Detector target: generated → 1, genuine → 0.
    pub fn target(self) -> f32 {
        match self {
            Label::Genuine => 0.0,
            Label::Generated => 1.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Genuine => "genuine",
            Label::Generated => "generated",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genuine" => Ok(Label::Genuine),
            "generated" => Ok(Label::Generated),
            other => Err(Error::Format(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// A pixel image in `[0, 1]`, stored `H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageExample {
    pub pixels: Array3<f32>,
    pub label: Label,
    pub source: String,
    pub id: String,
}

impl ImageExample {
    pub fn new(pixels: Array3<f32>, label: Label, source: impl Into<String>, id: impl Into<String>) -> Result<Self> {
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            label,
            source: source.into(),
            id: id.into(),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the corpus root.
    pub path: PathBuf,
    pub label: Label,
    pub source: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRecord>,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn select(&self, label: Option<Label>, split: Option<Split>) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| label.is_none_or(|l| r.label == l) && split.is_none_or(|s| r.split == s))
            .collect()
    }

    /// Appends records from `other`, rejecting duplicate ids.
    pub fn merge(&mut self, other: CorpusManifest) -> Result<()> {
        let existing: HashSet<String> = self.records.iter().map(|r| r.id.clone()).collect();
        for r in other.records {
            if existing.contains(&r.id) {
                return Err(Error::Config(format!("duplicate manifest id `{}`", r.id)));
            }
            self.records.push(r);
        }
        Ok(())
    }

    /// Ids unique and every path a relative path below the root.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::Format(format!("duplicate id `{}`", r.id)));
            }
            if r.path.is_absolute() || r.path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(Error::Format(format!("path `{}` escapes the corpus root", r.path.display())));
            }
            if !root.join(&r.path).is_file() {
                return Err(Error::Format(format!("missing file `{}`", r.path.display())));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# seed\t{}\n", self.seed);
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.path.to_string_lossy(),
                r.label,
                r.source,
                r.split
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut m = CorpusManifest::default();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(seed) = rest.trim().strip_prefix("seed") {
                    m.seed = seed
                        .trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("manifest line {}: bad seed", n + 1)))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("manifest line {}: expected 5 fields, got {}", n + 1, fields.len())));
            }
            m.records.push(ManifestRecord {
                id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                label: fields[2].parse()?,
                source: fields[3].to_string(),
                split: fields[4].parse()?,
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        fs::write(path, self.to_tsv()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path).at(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub genuine: usize,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Writes `genuine/<id>.png` images and `manifest.tsv` below `root`.
pub fn synthesize_toy_corpus(config: &SynthConfig, root: &Path) -> Result<CorpusManifest> {
    if config.genuine < 2 {
        return Err(Error::Config(format!("need at least 2 genuine images, got {}", config.genuine)));
    }
    if config.image_size < 8 {
        return Err(Error::Config("image_size must be at least 8".into()));
    }
    let dir = root.join("genuine");
    fs::create_dir_all(&dir).at(&dir)?;
    let mut manifest = CorpusManifest {
        records: Vec::with_capacity(config.genuine),
        seed: config.seed,
    };
    for i in 0..config.genuine {
        // per-image stream so any single image can be regenerated in isolation
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
        let pixels = synth_genuine(config.image_size, &mut rng);
        let id = format!("g{i:05}");
        let rel = PathBuf::from("genuine").join(format!("{id}.png"));
        save_png(&pixels, &root.join(&rel))?;
        manifest.records.push(ManifestRecord {
            id,
            path: rel,
            label: Label::Genuine,
            source: "procedural".into(),
            split: Split::Train,
        });
    }
    let manifest = split_dataset(&manifest, config.ratios, config.seed)?;
    manifest.save(&root.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Samples `count` images from the latent diffusion model, decodes them with
/// the base VAE, and writes `generated/<id>.png` below `root`. The returned
/// records are labeled generated and split with `ratios`; `manifest.tsv` is
/// left to the caller.
pub fn generate_fake_corpus(
    model: &LatentDiffusionModel,
    vae: &VaeCodec,
    count: usize,
    seed: u64,
    ratios: [f64; 3],
    root: &Path,
) -> Result<CorpusManifest> {
    if !model.trained || !vae.trained {
        return Err(Error::State("generation needs a trained diffusion model and VAE".into()));
    }
    let mut manifest = CorpusManifest {
        records: Vec::with_capacity(count),
        seed,
    };
    if count == 0 {
        return Ok(manifest);
    }
    let dir = root.join("generated");
    fs::create_dir_all(&dir).at(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = sample_latents(model, count, &mut rng, 64)?;
    for (chunk_no, chunk) in latents.chunks(64).enumerate() {
        let z = LatentState {
            z: Tensor::cat(chunk, 0)?,
            t: 0,
        };
        for (k, pixels) in from_tensor(&vae.decode(&z)?)?.into_iter().enumerate() {
            let id = format!("f{:05}", chunk_no * 64 + k);
            let rel = PathBuf::from("generated").join(format!("{id}.png"));
            save_png(&pixels, &root.join(&rel))?;
            manifest.records.push(ManifestRecord {
                id,
                path: rel,
                label: Label::Generated,
                source: GENERATOR_SOURCE.into(),
                split: Split::Train,
            });
        }
    }
    split_dataset(&manifest, ratios, seed)
}

/// Source tag of images sampled from the toy latent diffusion model.
pub const GENERATOR_SOURCE: &str = "toy-ldm";

/// One procedural "photograph": a 1/f^a noise field, a colour gradient, and
/// a few anti-aliased shapes.
pub fn synth_genuine(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let exponent = rng.random_range(1.5..2.1);
    let luma = power_law_field(size, exponent, rng);
    let chroma: Vec<Array2<f64>> = (0..3).map(|_| power_law_field(size, exponent + 0.3, rng)).collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let contrast = rng.random_range(0.06..0.16);
    let chroma_gain = rng.random_range(0.01..0.05);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let slope: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));

    let mut img = Array3::<f64>::zeros((size, size, 3));
    let (ct, st) = (theta.cos(), theta.sin());
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 + 0.5) / size as f64 - 0.5) * ct + ((y as f64 + 0.5) / size as f64 - 0.5) * st;
            for c in 0..3 {
                img[[y, x, c]] = base[c] + contrast * luma[[y, x]] + chroma_gain * chroma[c][[y, x]] + slope[c] * u;
            }
        }
    }

    let shapes = rng.random_range(0..4);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let opacity = rng.random_range(0.4..0.9);
        let cx = rng.random_range(0.1..0.9) * size as f64;
        let cy = rng.random_range(0.1..0.9) * size as f64;
        let rx = rng.random_range(0.08..0.3) * size as f64;
        let ry = rng.random_range(0.08..0.3) * size as f64;
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let ellipse = rng.random_bool(0.5);
        let shade = rng.random_range(-0.15..0.15);
        let (ca, sa) = (angle.cos(), angle.sin());
        let inside = |px: f64, py: f64| {
            let (dx, dy) = (px - cx, py - cy);
            let (u, v) = ((dx * ca + dy * sa) / rx, (-dx * sa + dy * ca) / ry);
            if ellipse {
                u * u + v * v <= 1.0
            } else {
                u.abs() <= 1.0 && v.abs() <= 1.0
            }
        };
        // 4×4 supersampled coverage gives the anti-aliased edge
        for y in 0..size {
            for x in 0..size {
                let mut cover = 0.0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        if inside(x as f64 + (sx as f64 + 0.5) / 4.0, y as f64 + (sy as f64 + 0.5) / 4.0) {
                            cover += 1.0 / 16.0;
                        }
                    }
                }
                if cover > 0.0 {
                    let a = cover * opacity;
                    let light = shade * ((y as f64 - cy) / size as f64);
                    for c in 0..3 {
                        let v = &mut img[[y, x, c]];
                        *v = (1.0 - a) * *v + a * (color[c] + light);
                    }
                }
            }
        }
    }
    img.mapv(|v| v.clamp(0.0, 1.0) as f32)
}

/// Zero-mean, unit-variance Gaussian field with amplitude spectrum ∝ 1/f^exponent.
fn power_law_field(size: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut buf: Vec<Complex<f64>> = (0..size * size)
        .map(|_| Complex::new(rng.sample::<f64, _>(rand_distr::StandardNormal), 0.0))
        .collect();
    fft2d(&mut buf, size, size, false);
    for ky in 0..size {
        for kx in 0..size {
            let fy = ky.min(size - ky) as f64;
            let fx = kx.min(size - kx) as f64;
            let f = (fx * fx + fy * fy).sqrt();
            let gain = if f == 0.0 { 0.0 } else { f.powf(-exponent) };
            buf[ky * size + kx] *= gain;
        }
    }
    fft2d(&mut buf, size, size, true);
    let vals: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt().max(1e-12);
    Array2::from_shape_vec((size, size), vals.into_iter().map(|v| (v - mean) / std).collect())
        .expect("field shape")
}

/// Stratified by label; each label's records are ordered by id and shuffled
/// with a label-specific stream, so one label's assignment never depends on
/// how many records the other label has.
pub fn split_dataset(manifest: &CorpusManifest, ratios: [f64; 3], seed: u64) -> Result<CorpusManifest> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut by_label: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_label.entry(r.label).or_default().push(i);
    }
    let mut out = manifest.clone();
    out.seed = seed;
    for (label, mut idx) in by_label {
        idx.sort_by(|a, b| manifest.records[*a].id.cmp(&manifest.records[*b].id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (label as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (ratios[0] * n as f64).round() as usize;
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
        for (k, i) in idx.into_iter().enumerate() {
            out.records[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

/// Decodes any PNG, normalizes to `[0, 1]`, and bilinearly resizes to
/// `target` (height, width) when the sizes differ.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<Array3<f32>> {
    let bytes = fs::read(path).at(path)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let pixels = Array3::from_shape_vec((h, w, 3), raw.into_iter().map(|v| v as f32 / 255.0).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    if (h, w) == target {
        Ok(pixels)
    } else {
        Ok(resize_bilinear(&pixels, target))
    }
}

pub fn load_example(root: &Path, record: &ManifestRecord, size: usize) -> Result<ImageExample> {
    let pixels = load_image(&root.join(&record.path), (size, size))?;
    ImageExample::new(pixels, record.label, record.source.clone(), record.id.clone())
}

pub fn load_examples(root: &Path, records: &[&ManifestRecord], size: usize) -> Result<Vec<ImageExample>> {
    records.iter().map(|r| load_example(root, r, size)).collect()
}

/// Half-pixel-centre bilinear interpolation with edge clamping.
pub fn resize_bilinear(src: &Array3<f32>, target: (usize, usize)) -> Array3<f32> {
    let (h, w, c) = src.dim();
    let (th, tw) = target;
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Array3::<f32>::zeros((th, tw, c));
    for y in 0..th {
        let (y0, y1, fy) = coord(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = coord(x, w, tw);
            for ch in 0..c {
                let top = src[[y0, x0, ch]] as f64 * (1.0 - fx) + src[[y0, x1, ch]] as f64 * fx;
                let bot = src[[y1, x0, ch]] as f64 * (1.0 - fx) + src[[y1, x1, ch]] as f64 * fx;
                out[[y, x, ch]] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

/// Lossless 8-bit RGB PNG.
pub fn save_png(pixels: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::shape("3 channels", c));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let raw: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Format("bad buffer".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Stacks `H × W × C` arrays into one `(B, C, H, W)` tensor.
pub fn to_tensor(images: &[&Array3<f32>]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Config("empty image batch".into()))?;
    let (h, w, c) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::shape(format!("{:?}", (h, w, c)), format!("{:?}", img.dim())));
        }
        for ch in 0..c {
            data.extend(img.index_axis(Axis(2), ch).iter().copied());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &device())?)
}

pub fn examples_to_tensor(examples: &[ImageExample]) -> Result<Tensor> {
    to_tensor(&examples.iter().map(|e| &e.pixels).collect::<Vec<_>>())
}

/// Inverse of [`to_tensor`].
pub fn from_tensor(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| {
            let mut a = Array3::<f32>::zeros((h, w, c));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        a[[y, x, ch]] = data[((i * c + ch) * h + y) * w + x];
                    }
                }
            }
            a
        })
        .collect())
}

/// Rounds to the 8-bit grid the PNG files store.
pub fn quantize(pixels: &Array3<f32>) -> Array3<f32> {
    pixels.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
