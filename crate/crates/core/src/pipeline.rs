//! Run directory stages. Each stage checks that its prerequisites completed
//! under the current configuration, skips itself when its own record is
//! current, and records its artifacts in `run.json`.
//!
//! ```text
//! synth ─┬─ train-vae ── train-diffusion ── generate ── train-detector ─┐
//!        │       └──────────────┐                                      ├─ attack ── report
//!        └─ prototype ── train-controlvae ─────────────────────────────┘
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attacks::{self, AttackRun, AttackSpec, ImageResult, StealthModels, SuiteOptions, SuiteResult};
use crate::config::{hash_json, RunConfig};
use crate::corpus::{self, CorpusManifest, ImageExample, Label, SynthConfig, Split};
use crate::detectors::{self, Architecture, DetectorTraining, SurrogateDetector};
use crate::error::{Error, IoContext, Result};
use crate::evalreport::{self, Outcome};
use crate::genmodels::{
    self, ControlTraining, ControlVaeModel, DiffusionTraining, LatentDiffusionModel, VaeCodec, VaeTraining,
};
use crate::spectral::{self, DenoiserFilter, DenoiserTraining, LearnedDenoiser, PrototypeConvention};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    TrainVae,
    TrainDiffusion,
    Generate,
    Prototype,
    TrainControlvae,
    TrainDetector,
    Attack,
    Report,
}

impl Stage {
    /// Dependency order.
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::TrainVae,
        Stage::TrainDiffusion,
        Stage::Generate,
        Stage::Prototype,
        Stage::TrainControlvae,
        Stage::TrainDetector,
        Stage::Attack,
        Stage::Report,
    ];

    /// Subcommand name.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainVae => "train-vae",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::Generate => "generate",
            Stage::Prototype => "prototype",
            Stage::TrainControlvae => "train-controlvae",
            Stage::TrainDetector => "train-detector",
            Stage::Attack => "attack",
            Stage::Report => "report",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::TrainVae => &[Stage::Synth],
            Stage::TrainDiffusion => &[Stage::TrainVae],
            Stage::Generate => &[Stage::TrainDiffusion],
            Stage::Prototype => &[Stage::Synth],
            Stage::TrainControlvae => &[Stage::TrainVae, Stage::Prototype],
            Stage::TrainDetector => &[Stage::Generate],
            Stage::Attack => &[Stage::TrainDetector, Stage::TrainControlvae, Stage::TrainDiffusion],
            Stage::Report => &[Stage::Attack, Stage::Prototype],
        }
    }

    /// The configuration this stage reads directly.
    fn settings(self, c: &RunConfig) -> serde_json::Value {
        let v = serde_json::to_value(c).expect("config serializes");
        match self {
            Stage::Synth => json!({"seed": c.seed, "corpus": {"image_size": c.corpus.image_size, "genuine": c.corpus.genuine, "ratios": c.corpus.ratios}}),
            Stage::TrainVae => json!({"seed": c.seed, "vae": v["vae"]}),
            Stage::TrainDiffusion => json!({"seed": c.seed, "diffusion": v["diffusion"]}),
            Stage::Generate => json!({"seed": c.seed, "generated": c.corpus.generated, "ratios": c.corpus.ratios}),
            Stage::Prototype => json!({"seed": c.seed, "prototype": v["prototype"]}),
            Stage::TrainControlvae => json!({"seed": c.seed, "controlvae": v["controlvae"]}),
            Stage::TrainDetector => json!({"seed": c.seed, "detector": v["detector"]}),
            Stage::Attack => json!({"seed": c.seed, "attack": v["attack"], "specs": c.attack_specs()}),
            Stage::Report => json!({}),
        }
    }

    /// Hash of this stage's settings and, recursively, its prerequisites'.
    pub fn hash(self, c: &RunConfig) -> String {
        let deps: Vec<String> = self.prerequisites().iter().map(|d| d.hash(c)).collect();
        hash_json(&json!({"stage": self.command(), "settings": self.settings(c), "deps": deps}).to_string())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.command())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.command() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub hash: String,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub seconds: f64,
}

/// `run.json`: completed stages in dependency order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub tool_version: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn new(config: &RunConfig) -> Self {
        Self {
            run_id: format!("run-{}", config.hash()),
            config_hash: config.hash(),
            tool_version: TOOL_VERSION.to_string(),
            stages: Vec::new(),
        }
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    fn upsert(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|r| r.stage);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").at(path)
    }
}

/// What happened when a stage was requested.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Completed(Vec<String>),
    /// Already complete under the current configuration.
    UpToDate,
}

/// A run directory bound to one configuration.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: RunManifest,
}

const MAX_BATCH: usize = 64;

impl Run {
    pub fn open(dir: &Path, config: RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join("run.json");
        let mut manifest = if path.is_file() {
            RunManifest::load(&path)?
        } else {
            RunManifest::new(&config)
        };
        manifest.config_hash = config.hash();
        manifest.tool_version = TOOL_VERSION.to_string();
        let run = Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
        };
        let text = toml::to_string(&run.config).map_err(|e| Error::Format(e.to_string()))?;
        let cfg_path = run.dir.join("config.toml");
        fs::write(&cfg_path, text).at(&cfg_path)?;
        Ok(run)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Whether `stage` completed under the current configuration and its
    /// artifacts are still present.
    pub fn is_current(&self, stage: Stage) -> bool {
        self.manifest
            .record(stage)
            .is_some_and(|r| r.hash == stage.hash(&self.config) && r.artifacts.iter().all(|a| self.path(a).exists()))
    }

    fn check_prerequisites(&self, stage: Stage) -> Result<()> {
        for dep in stage.prerequisites() {
            if !self.is_current(*dep) {
                return Err(Error::Prerequisite {
                    stage: dep.command().to_string(),
                    command: dep.command().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Runs `stage` unless it is already current.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        self.check_prerequisites(stage)?;
        if self.is_current(stage) {
            log::info!("{stage}: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        let start = Instant::now();
        log::info!("{stage}: running");
        let artifacts = match stage {
            Stage::Synth => self.synth()?,
            Stage::TrainVae => self.train_vae()?,
            Stage::TrainDiffusion => self.train_diffusion()?,
            Stage::Generate => self.generate()?,
            Stage::Prototype => self.prototype()?,
            Stage::TrainControlvae => self.train_controlvae()?,
            Stage::TrainDetector => self.train_detectors()?,
            Stage::Attack => self.attack()?,
            Stage::Report => self.report()?,
        };
        self.manifest.upsert(StageRecord {
            stage,
            hash: stage.hash(&self.config),
            artifacts: artifacts.clone(),
            seconds: start.elapsed().as_secs_f64(),
        });
        self.manifest.save(&self.path("run.json"))?;
        log::info!("{stage}: done in {:.1}s", start.elapsed().as_secs_f64());
        Ok(StageOutcome::Completed(artifacts))
    }

    /// Runs every stage in dependency order.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        let h = hash_json(&format!("{}:{}", self.config.seed, stage.command()));
        u64::from_str_radix(&h[..16], 16).expect("hex digest")
    }

    // ---- loading helpers

    fn corpus_root(&self) -> PathBuf {
        self.path("corpus")
    }

    pub fn corpus_manifest(&self) -> Result<CorpusManifest> {
        let full = self.path("corpus/manifest.tsv");
        CorpusManifest::load(&full)
    }

    /// Examples of one label and split, ordered by id.
    pub fn examples(&self, label: Label, split: Split) -> Result<Vec<ImageExample>> {
        let m = if label == Label::Genuine {
            CorpusManifest::load(&self.path("corpus/genuine.tsv"))?
        } else {
            self.corpus_manifest()?
        };
        let mut recs = m.select(Some(label), Some(split));
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        corpus::load_examples(&self.corpus_root(), &recs, self.config.corpus.image_size)
    }

    fn pixels(examples: &[ImageExample]) -> Vec<Array3<f32>> {
        examples.iter().map(|e| e.pixels.clone()).collect()
    }

    pub fn load_vae(&self) -> Result<VaeCodec> {
        Ok(VaeCodec::load(&self.path("models/vae.lswt"))?.0)
    }

    pub fn load_diffusion(&self) -> Result<LatentDiffusionModel> {
        LatentDiffusionModel::load(&self.path("models/diffusion.lswt"))
    }

    pub fn load_control(&self, base: &VaeCodec) -> Result<ControlVaeModel> {
        ControlVaeModel::load(&self.path("models/controlvae.lswt"), base)
    }

    pub fn load_detector(&self, arch: Architecture) -> Result<SurrogateDetector> {
        SurrogateDetector::load(&self.path(&format!("models/detector_{}.lswt", arch.id())), arch)
    }

    pub fn load_detectors(&self) -> Result<BTreeMap<Architecture, SurrogateDetector>> {
        self.config
            .detector_architectures()
            .into_iter()
            .map(|a| Ok((a, self.load_detector(a)?)))
            .collect()
    }

    pub fn filter(&self) -> Result<DenoiserFilter> {
        Ok(match self.config.prototype.filter.as_str() {
            "learned" => DenoiserFilter::Learned(LearnedDenoiser::load(&self.path("models/denoiser.lswt"))?),
            _ => DenoiserFilter::default_blur(),
        })
    }

    pub fn load_prototype(&self) -> Result<spectral::NoisePrototype> {
        spectral::load_prototype(&self.path("prototype/prototype.lsnp"), &self.filter()?)
    }

    // ---- stages

    fn synth(&self) -> Result<Vec<String>> {
        let root = self.corpus_root();
        remove_dir(&root.join("genuine"))?;
        let c = &self.config.corpus;
        let cfg = SynthConfig {
            image_size: c.image_size,
            genuine: c.genuine,
            seed: self.stage_seed(Stage::Synth),
            ratios: self.config.ratios(),
        };
        let m = corpus::synthesize_toy_corpus(&cfg, &root)?;
        m.save(&root.join("genuine.tsv"))?;
        Ok(vec!["corpus/genuine.tsv".into(), "corpus/genuine".into()])
    }

    fn train_vae(&self) -> Result<Vec<String>> {
        let train = Self::pixels(&self.examples(Label::Genuine, Split::Train)?);
        let v = &self.config.vae;
        let tcfg = VaeTraining {
            epochs: v.epochs,
            batch: v.batch,
            lr: v.lr,
            kl_weight: v.kl_weight,
            seed: self.stage_seed(Stage::TrainVae),
        };
        let trained = genmodels::train_vae(&train, &self.config.vae_config(), &tcfg)?;
        trained.vae.save(&self.path("models/vae.lswt"), &trained.store)?;
        trained.curve.save(&self.path("curves/vae.tsv"))?;
        let val = self.examples(Label::Genuine, Split::Val)?;
        let mut lines = String::new();
        if !val.is_empty() {
            let mut total = 0.0;
            for chunk in val.chunks(MAX_BATCH) {
                let x = corpus::examples_to_tensor(chunk)?;
                let r = corpus::from_tensor(&trained.vae.reconstruct(&x)?)?;
                for (e, y) in chunk.iter().zip(&r) {
                    total += evalreport::psnr(&e.pixels, y)?;
                }
            }
            lines.push_str(&format!("val_psnr\t{:.4}\n", total / val.len() as f64));
        }
        lines.push_str(&format!("latent_scale\t{:.6}\n", trained.vae.latent_scale));
        write(&self.path("reports/vae.txt"), &lines)?;
        Ok(vec!["models/vae.lswt".into(), "curves/vae.tsv".into(), "reports/vae.txt".into()])
    }

    fn train_diffusion(&self) -> Result<Vec<String>> {
        let vae = self.load_vae()?;
        let train = self.examples(Label::Genuine, Split::Train)?;
        let mut parts = Vec::new();
        for chunk in train.chunks(MAX_BATCH) {
            parts.push(vae.encode(&corpus::examples_to_tensor(chunk)?)?.z.detach());
        }
        let latents = candle_core::Tensor::cat(&parts, 0)?;
        let d = &self.config.diffusion;
        let tcfg = DiffusionTraining {
            epochs: d.epochs,
            batch: d.batch,
            lr: d.lr,
            seed: self.stage_seed(Stage::TrainDiffusion),
        };
        let trained = genmodels::train_latent_diffusion(&latents, &self.config.denoiser_net(), &self.config.schedule(), &tcfg)?;
        trained.model.save(&self.path("models/diffusion.lswt"), &trained.store)?;
        trained.curve.save(&self.path("curves/diffusion.tsv"))?;
        trained.val_curve.save(&self.path("curves/diffusion_val.tsv"))?;
        Ok(vec![
            "models/diffusion.lswt".into(),
            "curves/diffusion.tsv".into(),
            "curves/diffusion_val.tsv".into(),
        ])
    }

    fn generate(&self) -> Result<Vec<String>> {
        let root = self.corpus_root();
        remove_dir(&root.join("generated"))?;
        let vae = self.load_vae()?;
        let model = self.load_diffusion()?;
        let fake = corpus::generate_fake_corpus(
            &model,
            &vae,
            self.config.corpus.generated,
            self.stage_seed(Stage::Generate),
            self.config.ratios(),
            &root,
        )?;
        fake.save(&root.join("generated.tsv"))?;
        let mut m = CorpusManifest::load(&root.join("genuine.tsv"))?;
        m.merge(fake)?;
        m.validate(&root)?;
        m.save(&root.join("manifest.tsv"))?;
        Ok(vec!["corpus/generated.tsv".into(), "corpus/manifest.tsv".into(), "corpus/generated".into()])
    }

    fn prototype(&self) -> Result<Vec<String>> {
        let train = self.examples(Label::Genuine, Split::Train)?;
        let mut artifacts = Vec::new();
        let filter = if self.config.prototype.filter == "learned" {
            let p = &self.config.prototype;
            let cfg = DenoiserTraining {
                width: 16,
                noise_sigma: p.denoiser_sigma,
                epochs: p.denoiser_epochs,
                batch: 32,
                lr: 1e-3,
                seed: self.stage_seed(Stage::Prototype),
            };
            let (den, curve) = spectral::train_denoiser(&Self::pixels(&train), &cfg)?;
            den.save(&self.path("models/denoiser.lswt"))?;
            let text: String = curve.iter().enumerate().map(|(i, v)| format!("{i}\t{v:.6e}\n")).collect();
            write(&self.path("curves/denoiser.tsv"), &format!("step\tmse\n{text}"))?;
            artifacts.push("models/denoiser.lswt".into());
            artifacts.push("curves/denoiser.tsv".into());
            DenoiserFilter::Learned(den)
        } else {
            DenoiserFilter::default_blur()
        };
        let n = self.config.prototype.count.min(train.len());
        let residuals = train[..n]
            .iter()
            .map(|e| spectral::noise_residual(e, &filter))
            .collect::<Result<Vec<_>>>()?;
        let convention = PrototypeConvention::from_id(&self.config.prototype.convention)
            .ok_or_else(|| Error::Config(format!("unknown prototype convention {:?}", self.config.prototype.convention)))?;
        let proto = spectral::noise_prototype_with(&residuals, &filter, convention)?;
        spectral::save_prototype(&proto, &self.path("prototype/prototype.lsnp"))?;
        spectral::render_spectrum(&proto.spectrum, true, &self.path("prototype/prototype.png"))?;
        artifacts.push("prototype/prototype.lsnp".into());
        artifacts.push("prototype/prototype.png".into());
        Ok(artifacts)
    }

    fn train_controlvae(&self) -> Result<Vec<String>> {
        let vae = self.load_vae()?;
        let filter = self.filter()?;
        let proto = self.load_prototype()?;
        let train = Self::pixels(&self.examples(Label::Genuine, Split::Train)?);
        let mut val = Self::pixels(&self.examples(Label::Genuine, Split::Val)?);
        val.truncate(MAX_BATCH);
        let seed = self.stage_seed(Stage::TrainControlvae);
        let perceptual = perceptual_network(self.config.corpus.image_size, seed)?;
        let c = &self.config.controlvae;
        let cfg = ControlTraining {
            epochs: c.epochs,
            batch: c.batch,
            lr: c.lr,
            seed,
        };
        let trained = genmodels::train_control_vae(&train, &val, &vae, &proto, &filter, &self.config.loss_weights(), &perceptual, &cfg)?;
        trained.model.save(&self.path("models/controlvae.lswt"))?;
        trained.curve.save(&self.path("curves/controlvae.tsv"))?;
        let text: String = trained.val_npl.iter().enumerate().map(|(i, v)| format!("{i}\t{v:.6e}\n")).collect();
        write(&self.path("curves/controlvae_val_npl.tsv"), &format!("epoch\tnpl\n{text}"))?;
        Ok(vec![
            "models/controlvae.lswt".into(),
            "curves/controlvae.tsv".into(),
            "curves/controlvae_val_npl.tsv".into(),
        ])
    }

    fn split_both(&self, split: Split) -> Result<Vec<ImageExample>> {
        let mut v = self.examples(Label::Genuine, split)?;
        v.extend(self.examples(Label::Generated, split)?);
        Ok(v)
    }

    fn train_detectors(&self) -> Result<Vec<String>> {
        let train = self.split_both(Split::Train)?;
        let val = self.split_both(Split::Val)?;
        let test = self.split_both(Split::Test)?;
        let mut artifacts = Vec::new();
        for arch in self.config.detector_architectures() {
            let d = &self.config.detector;
            let cfg = DetectorTraining {
                epochs: d.epochs,
                batch: d.batch,
                lr: d.lr,
                seed: self.stage_seed(Stage::TrainDetector) ^ arch as u64,
            };
            log::info!("training detector {arch}");
            let trained = detectors::train_detector(&train, &val, arch, &cfg)?;
            let id = arch.id();
            trained.detector.save(&self.path(&format!("models/detector_{id}.lswt")), &trained.store)?;
            trained.curve.save(&self.path(&format!("curves/detector_{id}.tsv")))?;
            let eval_set = if test.is_empty() { &val } else { &test };
            let report = detectors::evaluate_detector(&trained.detector, eval_set)?;
            log::info!("{arch}: held-out accuracy {:.4} (best epoch {})", report.accuracy, trained.best_epoch);
            let rel = format!("reports/detector_{id}.txt");
            fs::create_dir_all(self.path("reports")).at(&self.path("reports"))?;
            report.save(&self.path(&rel))?;
            artifacts.push(format!("models/detector_{id}.lswt"));
            artifacts.push(format!("curves/detector_{id}.tsv"));
            artifacts.push(rel);
        }
        Ok(artifacts)
    }

    /// Generated test images the attacks run on, ordered by id.
    pub fn attack_images(&self) -> Result<Vec<ImageExample>> {
        let mut imgs = self.examples(Label::Generated, Split::Test)?;
        if self.config.attack.images > 0 {
            imgs.truncate(self.config.attack.images);
        }
        Ok(imgs)
    }

    fn attack(&self) -> Result<Vec<String>> {
        let images = self.attack_images()?;
        let detectors = self.load_detectors()?;
        let vae = self.load_vae()?;
        let diffusion = self.load_diffusion()?;
        let control = self.load_control(&vae)?;
        let models = StealthModels {
            vae: &vae,
            diffusion: &diffusion,
            control: &control,
        };
        let adv_dir = self.path("adv");
        remove_dir(&adv_dir)?;
        let opts = SuiteOptions {
            batch: self.config.attack.batch,
            seed: self.stage_seed(Stage::Attack),
            output_dir: Some(&adv_dir),
        };
        let suite = attacks::run_attack_suite(&images, &self.config.attack_specs(), &detectors, Some(&models), &opts)?;
        save_suite(&suite, &self.path("attack/results.json"))?;
        let failed: usize = suite.runs.iter().map(|r| r.outcomes.iter().filter(|o| o.error.is_some()).count()).sum();
        if failed > 0 {
            log::warn!("{failed} per-image attack failures recorded");
        }
        Ok(vec!["attack/results.json".into(), "adv".into()])
    }

    /// Rebuilds the suite from `attack/results.json` and the stored images.
    pub fn load_suite(&self) -> Result<SuiteResult> {
        let path = self.path("attack/results.json");
        let text = fs::read_to_string(&path).at(&path)?;
        let stored: StoredSuite = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let originals: BTreeMap<String, ImageExample> = self.attack_images()?.into_iter().map(|e| (e.id.clone(), e)).collect();
        let size = self.config.corpus.image_size;
        let mut runs = Vec::new();
        for r in stored.runs {
            let mut outcomes = Vec::new();
            for o in r.outcomes {
                let original = originals
                    .get(&o.id)
                    .ok_or_else(|| Error::Format(format!("attacked image `{}` is not in the test split", o.id)))?
                    .pixels
                    .clone();
                let adversarial = if o.error.is_none() {
                    let p = self.dir.join("adv").join(&r.spec.name).join(r.spec.source.id()).join(format!("{}.png", o.id));
                    corpus::load_image(&p, (size, size))?
                } else {
                    original.clone()
                };
                outcomes.push(ImageResult {
                    id: o.id,
                    original,
                    adversarial,
                    scores: o.scores,
                    error: o.error,
                });
            }
            runs.push(AttackRun {
                spec: r.spec,
                outcomes,
                seed: r.seed,
                seconds: r.seconds,
            });
        }
        Ok(SuiteResult {
            runs,
            targets: stored.targets,
        })
    }

    fn report(&self) -> Result<Vec<String>> {
        let suite = self.load_suite()?;
        let genuine = self.examples(Label::Genuine, Split::Test)?;
        let refs: Vec<&Array3<f32>> = genuine.iter().map(|e| &e.pixels).collect();
        let out_dir = self.path("report");
        remove_dir(&out_dir)?;
        let out = evalreport::build_report(&suite, &refs, &self.filter()?, &out_dir)?;
        for g in &out.gaps {
            log::warn!("report gap: {g}");
        }
        Ok(out
            .files
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect())
    }
}

/// Feature network for the perceptual term: an untrained convnet with
/// fixed random weights.
pub fn perceptual_network(image_size: usize, seed: u64) -> Result<SurrogateDetector> {
    SurrogateDetector::init(Architecture::ConvnetSmall, image_size, seed ^ 0x9e3c)
}

#[derive(Serialize, Deserialize)]
struct StoredOutcome {
    id: String,
    scores: BTreeMap<String, Outcome>,
    error: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct StoredRun {
    spec: AttackSpec,
    seed: u64,
    seconds: f64,
    outcomes: Vec<StoredOutcome>,
}

#[derive(Serialize, Deserialize)]
struct StoredSuite {
    targets: Vec<String>,
    runs: Vec<StoredRun>,
}

fn save_suite(suite: &SuiteResult, path: &Path) -> Result<()> {
    let stored = StoredSuite {
        targets: suite.targets.clone(),
        runs: suite
            .runs
            .iter()
            .map(|r| StoredRun {
                spec: r.spec.clone(),
                seed: r.seed,
                seconds: r.seconds,
                outcomes: r
                    .outcomes
                    .iter()
                    .map(|o| StoredOutcome {
                        id: o.id.clone(),
                        scores: o.scores.clone(),
                        error: o.error.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    write(path, &serde_json::to_string_pretty(&stored).expect("suite serializes"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, text).at(path)
}

fn remove_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).at(path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::validate_str;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.command().parse::<Stage>().unwrap(), s);
            for d in s.prerequisites() {
                assert!(*d < s, "{d} must precede {s}");
            }
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn stage_hash_tracks_relevant_settings() {
        let a = RunConfig::default();
        let b = validate_str("[attack]\niterations = 7\n", &[]).unwrap();
        assert_eq!(Stage::TrainVae.hash(&a), Stage::TrainVae.hash(&b));
        assert_ne!(Stage::Attack.hash(&a), Stage::Attack.hash(&b));
        assert_ne!(Stage::Report.hash(&a), Stage::Report.hash(&b));
        let c = validate_str("[vae]\nepochs = 1\n", &[]).unwrap();
        assert_ne!(Stage::Generate.hash(&a), Stage::Generate.hash(&c));
        assert_eq!(Stage::Prototype.hash(&a), Stage::Prototype.hash(&c));
    }

    #[test]
    fn report_before_attack_names_attack() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::open(dir.path(), RunConfig::default()).unwrap();
        match run.run_stage(Stage::Report).unwrap_err() {
            Error::Prerequisite { command, .. } => assert_eq!(command, "attack"),
            e => panic!("{e}"),
        }
        match run.run_stage(Stage::TrainVae).unwrap_err() {
            Error::Prerequisite { command, .. } => assert_eq!(command, "synth"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn synth_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = validate_str("[corpus]\nimage_size = 16\ngenuine = 6\n", &[]).unwrap();
        let mut run = Run::open(dir.path(), cfg.clone()).unwrap();
        assert!(matches!(run.run_stage(Stage::Synth).unwrap(), StageOutcome::Completed(_)));
        assert_eq!(run.run_stage(Stage::Synth).unwrap(), StageOutcome::UpToDate);
        let mut reopened = Run::open(dir.path(), cfg).unwrap();
        assert_eq!(reopened.run_stage(Stage::Synth).unwrap(), StageOutcome::UpToDate);
        let changed = validate_str("[corpus]\nimage_size = 16\ngenuine = 8\n", &[]).unwrap();
        let mut rerun = Run::open(dir.path(), changed).unwrap();
        assert!(matches!(rerun.run_stage(Stage::Synth).unwrap(), StageOutcome::Completed(_)));
        assert_eq!(rerun.examples(Label::Genuine, Split::Train).unwrap().len()
            + rerun.examples(Label::Genuine, Split::Val).unwrap().len()
            + rerun.examples(Label::Genuine, Split::Test).unwrap().len(), 8);
    }
}
