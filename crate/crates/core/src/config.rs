//! Run configuration: a TOML file whose every key has a default.
//!
//! An empty file is a complete configuration. Float values accept numbers
//! or `"a/b"` fractions (`epsilon = "8/255"`). Unknown keys and type
//! mismatches are collected into one error listing each offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::attacks::spec::{check_unique, float_value, spec_from_table};
use crate::attacks::{default_attack_specs, AttackDefaults, AttackSpec, LatentAttackConfig, PgdConfig};
use crate::detectors::Architecture;
use crate::error::{Error, IoContext, Result};
use crate::genmodels::{CompositeLossWeights, DenoiserNetConfig, DiffusionSchedule, VaeConfig};
use crate::spectral::PrototypeConvention;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    pub image_size: usize,
    pub genuine: usize,
    pub generated: usize,
    /// Train, validation and test fractions.
    pub ratios: Vec<f64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            image_size: 64,
            genuine: 2000,
            generated: 2000,
            ratios: vec![0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSection {
    pub latent_channels: usize,
    pub c1: usize,
    pub c2: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            c1: 32,
            c2: 64,
            epochs: 30,
            batch: 32,
            lr: 2e-3,
            kl_weight: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub width: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub alpha_bar_end: f64,
    pub ddim_steps: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let s = DiffusionSchedule::default();
        Self {
            width: 64,
            blocks: 3,
            time_dim: 64,
            steps: s.steps,
            alpha_bar_end: s.alpha_bar_end,
            ddim_steps: s.ddim_steps,
            epochs: 60,
            batch: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSection {
    /// `blur` (5×5 Gaussian, σ = 1) or `learned` (small residual CNN).
    pub filter: String,
    /// `amplitude_of_mean` or `mean_amplitude`; see [`PrototypeConvention`].
    pub convention: String,
    /// Genuine training images whose residuals form the prototype.
    pub count: usize,
    pub denoiser_epochs: usize,
    pub denoiser_sigma: f64,
}

impl Default for PrototypeSection {
    fn default() -> Self {
        Self {
            filter: "blur".into(),
            convention: PrototypeConvention::MeanAmplitude.id().into(),
            count: 1000,
            denoiser_epochs: 5,
            denoiser_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVaeSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ControlVaeSection {
    fn default() -> Self {
        let w = CompositeLossWeights::default();
        Self {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSection {
    pub architectures: Vec<String>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            architectures: Architecture::ALL.iter().map(|a| a.id().to_string()).collect(),
            epochs: 10,
            batch: 48,
            lr: 2e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub surrogates: Vec<String>,
    /// Generated test images to attack; 0 attacks all of them.
    pub images: usize,
    pub batch: usize,
    pub fgsm_epsilon: f64,
    pub pgd_epsilon: f64,
    pub pgd_step: f64,
    pub pgd_iterations: usize,
    pub pre_epsilon: f64,
    pub pre_step: f64,
    pub pre_iterations: usize,
    pub diffusion_steps: usize,
    pub iterations: usize,
    pub step_size: f64,
    /// Explicit attack list; empty means none, fgsm, pgd, preprocess and
    /// stealth for every surrogate.
    #[serde(skip)]
    pub spec: Vec<AttackSpec>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let pgd = PgdConfig::baseline();
        let pre = PgdConfig::preprocess();
        let lat = LatentAttackConfig::default();
        Self {
            surrogates: vec![Architecture::ConvnetSmall.id().to_string()],
            images: 200,
            batch: 16,
            fgsm_epsilon: 8.0 / 255.0,
            pgd_epsilon: pgd.epsilon,
            pgd_step: pgd.step,
            pgd_iterations: pgd.iterations,
            pre_epsilon: pre.epsilon,
            pre_step: pre.step,
            pre_iterations: pre.iterations,
            diffusion_steps: lat.diffusion_steps,
            iterations: lat.iterations,
            step_size: lat.step_size,
            spec: Vec::new(),
        }
    }
}

/// Every setting of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub vae: VaeSection,
    pub diffusion: DiffusionSection,
    pub prototype: PrototypeSection,
    pub controlvae: ControlVaeSection,
    pub detector: DetectorSection,
    pub attack: AttackSection,
}

impl RunConfig {
    pub fn ratios(&self) -> [f64; 3] {
        let r = &self.corpus.ratios;
        [r[0], r[1], r[2]]
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            image_size: self.corpus.image_size,
            channels: 3,
            latent_channels: self.vae.latent_channels,
            c1: self.vae.c1,
            c2: self.vae.c2,
        }
    }

    pub fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule {
            steps: self.diffusion.steps,
            alpha_bar_end: self.diffusion.alpha_bar_end,
            ddim_steps: self.diffusion.ddim_steps,
        }
    }

    pub fn denoiser_net(&self) -> DenoiserNetConfig {
        DenoiserNetConfig {
            latent_channels: self.vae.latent_channels,
            latent_size: self.corpus.image_size / 8,
            width: self.diffusion.width,
            blocks: self.diffusion.blocks,
            time_dim: self.diffusion.time_dim,
        }
    }

    pub fn loss_weights(&self) -> CompositeLossWeights {
        CompositeLossWeights {
            alpha: self.controlvae.alpha,
            beta: self.controlvae.beta,
            gamma: self.controlvae.gamma,
        }
    }

    pub fn detector_architectures(&self) -> Vec<Architecture> {
        self.detector
            .architectures
            .iter()
            .filter_map(|s| s.parse().ok())
            .collect()
    }

    pub fn attack_defaults(&self) -> AttackDefaults {
        let a = &self.attack;
        AttackDefaults {
            fgsm_epsilon: a.fgsm_epsilon,
            pgd: PgdConfig {
                epsilon: a.pgd_epsilon,
                step: a.pgd_step,
                iterations: a.pgd_iterations,
            },
            preprocess: PgdConfig {
                epsilon: a.pre_epsilon,
                step: a.pre_step,
                iterations: a.pre_iterations,
            },
            latent: LatentAttackConfig {
                diffusion_steps: a.diffusion_steps,
                iterations: a.iterations,
                step_size: a.step_size,
                seed: self.seed,
            },
        }
    }

    /// The explicit attack list, or the default grid over the surrogates.
    pub fn attack_specs(&self) -> Vec<AttackSpec> {
        if !self.attack.spec.is_empty() {
            return self.attack.spec.clone();
        }
        let surrogates: Vec<Architecture> = self.attack.surrogates.iter().filter_map(|s| s.parse().ok()).collect();
        default_attack_specs(&surrogates, &self.attack_defaults())
    }

    /// Canonical JSON of the normalized configuration; independent of the
    /// key order of the source file.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["attack"]["spec"] = serde_json::to_value(&self.attack.spec).expect("specs serialize");
        serde_json::to_string(&v).expect("json value serializes")
    }

    pub fn hash(&self) -> String {
        hash_json(&self.canonical_json())
    }

    /// Semantic checks on an already well-typed configuration.
    fn constraints(&self, errors: &mut Vec<String>) {
        let c = &self.corpus;
        if c.image_size < 16 || c.image_size % 8 != 0 {
            errors.push(format!("corpus.image_size: {} must be a multiple of 8 and at least 16", c.image_size));
        }
        if c.genuine < 2 {
            errors.push(format!("corpus.genuine: need at least 2 images, got {}", c.genuine));
        }
        if c.generated < 2 {
            errors.push(format!("corpus.generated: need at least 2 images, got {}", c.generated));
        }
        if c.ratios.len() != 3 {
            errors.push(format!("corpus.ratios: expected 3 fractions, got {}", c.ratios.len()));
        } else if c.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (c.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errors.push(format!("corpus.ratios: {:?} must be non-negative and sum to 1", c.ratios));
        }
        let positive = [
            ("vae.latent_channels", self.vae.latent_channels),
            ("vae.c1", self.vae.c1),
            ("vae.c2", self.vae.c2),
            ("vae.batch", self.vae.batch),
            ("diffusion.width", self.diffusion.width),
            ("diffusion.time_dim", self.diffusion.time_dim),
            ("diffusion.batch", self.diffusion.batch),
            ("prototype.count", self.prototype.count),
            ("controlvae.batch", self.controlvae.batch),
            ("detector.batch", self.detector.batch),
            ("attack.batch", self.attack.batch),
        ];
        for (key, v) in positive {
            if v == 0 {
                errors.push(format!("{key}: must be positive"));
            }
        }
        let rates = [
            ("vae.lr", self.vae.lr),
            ("diffusion.lr", self.diffusion.lr),
            ("controlvae.lr", self.controlvae.lr),
            ("detector.lr", self.detector.lr),
        ];
        for (key, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{key}: {v} must be positive"));
            }
        }
        if !(self.vae.kl_weight >= 0.0 && self.vae.kl_weight.is_finite()) {
            errors.push(format!("vae.kl_weight: {} must be non-negative", self.vae.kl_weight));
        }
        if let Err(e) = self.schedule().validate() {
            errors.push(format!("diffusion: {e}"));
        }
        if PrototypeConvention::from_id(&self.prototype.convention).is_none() {
            errors.push(format!(
                "prototype.convention: expected \"amplitude_of_mean\" or \"mean_amplitude\", got {:?}",
                self.prototype.convention
            ));
        }
        if !(self.prototype.filter == "blur" || self.prototype.filter == "learned") {
            errors.push(format!("prototype.filter: expected \"blur\" or \"learned\", got {:?}", self.prototype.filter));
        }
        if let Err(e) = self.loss_weights().validate() {
            errors.push(format!("controlvae: {e}"));
        }
        for (key, list) in [("detector.architectures", &self.detector.architectures), ("attack.surrogates", &self.attack.surrogates)] {
            for id in list.iter() {
                if let Err(e) = id.parse::<Architecture>() {
                    errors.push(format!("{key}: {e}"));
                }
            }
        }
        if self.detector.architectures.is_empty() {
            errors.push("detector.architectures: at least one detector is required".into());
        }
        let trained = self.detector_architectures();
        for spec in self.attack_specs() {
            if !trained.contains(&spec.source) {
                errors.push(format!("attack: surrogate {} of {} is not in detector.architectures", spec.source, spec.name));
            }
        }
        let d = self.attack_defaults();
        for (key, p) in [("attack.pgd", d.pgd), ("attack.pre", d.preprocess)] {
            if let Err(e) = p.validate() {
                errors.push(format!("{key}_*: {e}"));
            }
        }
        if !(self.attack.fgsm_epsilon >= 0.0 && self.attack.fgsm_epsilon.is_finite()) {
            errors.push(format!("attack.fgsm_epsilon: {} must be non-negative", self.attack.fgsm_epsilon));
        }
        if !(self.attack.step_size >= 0.0 && self.attack.step_size.is_finite()) {
            errors.push(format!("attack.step_size: {} must be non-negative", self.attack.step_size));
        }
        if self.attack.diffusion_steps > self.diffusion.ddim_steps {
            errors.push(format!(
                "attack.diffusion_steps: {} exceeds diffusion.ddim_steps {}",
                self.attack.diffusion_steps, self.diffusion.ddim_steps
            ));
        }
    }
}

pub fn hash_json(json: &str) -> String {
    hex::encode(&Sha256::digest(json.as_bytes())[..12])
}

/// Parses `key=value` where `key` is dotted (`controlvae.gamma=10`). The
/// value is read as a TOML value, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn insert_path(table: &mut Table, path: &[String], value: Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(format!("{}: not a section", path.join("."))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Coerces `user` to the type of `default`, recording mismatches.
fn coerce(key: &str, default: &Value, user: &Value, errors: &mut Vec<String>) -> Option<Value> {
    let bad = |errors: &mut Vec<String>| {
        errors.push(format!("{key}: expected {}, got {user}", type_name(default)));
        None
    };
    match (default, user) {
        (Value::Float(_), u) => match float_value(u) {
            Some(f) => Some(Value::Float(f)),
            None => bad(errors),
        },
        (Value::Integer(_), Value::Integer(i)) if *i >= 0 => Some(Value::Integer(*i)),
        (Value::String(_), Value::String(s)) => Some(Value::String(s.clone())),
        (Value::Boolean(_), Value::Boolean(b)) => Some(Value::Boolean(*b)),
        (Value::Array(d), Value::Array(u)) => {
            let mut out = Vec::with_capacity(u.len());
            let before = errors.len();
            for (i, item) in u.iter().enumerate() {
                match d.first() {
                    Some(proto) => {
                        if let Some(v) = coerce(&format!("{key}[{i}]"), proto, item, errors) {
                            out.push(v);
                        }
                    }
                    None => out.push(item.clone()),
                }
            }
            (errors.len() == before).then_some(Value::Array(out))
        }
        (Value::Table(d), Value::Table(u)) => Some(Value::Table(merge(key, d, u, errors))),
        _ => bad(errors),
    }
}

fn merge(prefix: &str, defaults: &Table, user: &Table, errors: &mut Vec<String>) -> Table {
    let mut out = defaults.clone();
    for (k, v) in user {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match defaults.get(k) {
            None => errors.push(format!("{key}: unknown key")),
            Some(d) => {
                if let Some(c) = coerce(&key, d, v, errors) {
                    out.insert(k.clone(), c);
                }
            }
        }
    }
    out
}

/// Validates a parsed TOML tree: fills defaults, applies `overrides`, and
/// returns either the normalized configuration or every problem found.
pub fn validate_table(mut user: Table, overrides: &[String]) -> std::result::Result<RunConfig, Vec<String>> {
    let mut errors = Vec::new();
    for o in overrides {
        match parse_override(o) {
            Ok((path, value)) => {
                if let Err(e) = insert_path(&mut user, &path, value) {
                    errors.push(e);
                }
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    // attack specs are a list of tables with their own grammar
    let spec_value = match user.get_mut("attack") {
        Some(Value::Table(t)) => t.remove("spec"),
        _ => None,
    };
    let defaults = match Value::try_from(RunConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("default config is a table"),
    };
    let merged = merge("", &defaults, &user, &mut errors);
    let mut config: RunConfig = match Value::Table(merged).try_into() {
        Ok(c) => c,
        Err(e) => {
            errors.push(e.to_string());
            return Err(errors);
        }
    };
    if let Some(v) = spec_value {
        let attack_defaults = config.attack_defaults();
        match v {
            Value::Array(items) => {
                for (i, item) in items.iter().enumerate() {
                    let prefix = format!("attack.spec[{i}]");
                    match item {
                        Value::Table(t) => match spec_from_table(t, &prefix, &attack_defaults) {
                            Ok(s) => config.attack.spec.push(s),
                            Err(e) => errors.extend(e),
                        },
                        _ => errors.push(format!("{prefix}: expected a table")),
                    }
                }
                check_unique(&config.attack.spec, &mut errors);
            }
            _ => errors.push("attack.spec: expected an array of tables".into()),
        }
    }
    if errors.is_empty() {
        config.constraints(&mut errors);
    }
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}

pub fn validate_str(text: &str, overrides: &[String]) -> std::result::Result<RunConfig, Vec<String>> {
    match text.parse::<Table>() {
        Ok(t) => validate_table(t, overrides),
        Err(e) => Err(vec![format!("parse error: {e}")]),
    }
}

/// Reads and validates a configuration file; every problem is listed in
/// one [`Error::Validation`].
pub fn validate_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).at(p)?,
        None => String::new(),
    };
    validate_str(&text, overrides).map_err(Error::Validation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackMethod;

    #[test]
    fn empty_file_is_full_defaults() {
        let c = validate_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.attack_specs().len(), 5);
    }

    #[test]
    fn defaults_match_published_values() {
        let c = RunConfig::default();
        assert_eq!(c.attack.pre_epsilon, 4.0 / 255.0);
        assert_eq!(c.attack.pre_iterations, 10);
        assert_eq!(c.attack.pgd_epsilon, 8.0 / 255.0);
        assert_eq!(c.attack.diffusion_steps, 2);
        assert_eq!(c.attack.iterations, 5);
        assert_eq!((c.controlvae.alpha, c.controlvae.beta, c.controlvae.gamma), (1.0, 1.0, 10.0));
        assert_eq!(c.diffusion.ddim_steps, 20);
        assert_eq!(c.detector.lr, 2e-4);
        assert_eq!(c.detector.batch, 48);
        assert_eq!(c.detector.epochs, 10);
        assert_eq!(c.corpus.image_size, 64);
        assert_eq!((c.corpus.genuine, c.corpus.generated), (2000, 2000));
        assert_eq!(c.vae_config().latent_size(), 8);
    }

    #[test]
    fn type_error_names_the_key() {
        let e = validate_str("[controlvae]\ngamma = \"ten\"\n", &[]).unwrap_err();
        assert_eq!(e.len(), 1);
        assert!(e[0].starts_with("controlvae.gamma"), "{e:?}");
    }

    #[test]
    fn errors_are_aggregated() {
        let text = "seed = -1\ncolour = 3\n[vae]\nepochs = \"many\"\n[nonsense]\nx = 1\n";
        let e = validate_str(text, &[]).unwrap_err();
        let all = e.join("\n");
        for key in ["seed", "colour", "vae.epochs", "nonsense"] {
            assert!(all.contains(key), "{key} missing from {all}");
        }
    }

    #[test]
    fn fractions_and_integers_for_floats() {
        let c = validate_str("[attack]\npgd_epsilon = \"4/255\"\nstep_size = 1\n", &[]).unwrap();
        assert_eq!(c.attack.pgd_epsilon, 4.0 / 255.0);
        assert_eq!(c.attack.step_size, 1.0);
    }

    #[test]
    fn constraint_violations_are_reported() {
        let e = validate_str("[corpus]\nratios = [0.5, 0.1, 0.1]\n[prototype]\nfilter = \"median\"\n", &[]).unwrap_err();
        assert_eq!(e.len(), 2, "{e:?}");
        let e = validate_str("[attack]\nsurrogates = [\"convnet_deep\"]\n[detector]\narchitectures = [\"convnet_small\"]\n", &[]).unwrap_err();
        assert!(e[0].contains("convnet_deep"), "{e:?}");
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = validate_str("", &["controlvae.gamma=5".into(), "attack.surrogates=[\"convnet_deep\"]".into()]).unwrap();
        assert_eq!(c.controlvae.gamma, 5.0);
        assert_eq!(c.attack.surrogates, vec!["convnet_deep".to_string()]);
        assert!(validate_str("", &["controlvae.gama=5".into()]).is_err());
        assert!(validate_str("", &["novalue".into()]).is_err());
        let (path, v) = parse_override("prototype.filter=learned").unwrap();
        assert_eq!(path, vec!["prototype", "filter"]);
        assert_eq!(v, Value::String("learned".into()));
    }

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let a = validate_str("seed = 3\n[vae]\nepochs = 2\nbatch = 8\n[corpus]\ngenuine = 10\n", &[]).unwrap();
        let b = validate_str("[corpus]\ngenuine = 10\n[vae]\nbatch = 8\nepochs = 2\n", &["seed=3".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = validate_str("seed = 4\n", &[]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn inline_attack_specs() {
        let text = r#"
[attack]
pre_iterations = 3

[[attack.spec]]
method = "stealth"
control = false
name = "stealth_base"

[[attack.spec]]
method = "pgd"
"#;
        let c = validate_str(text, &[]).unwrap();
        let specs = c.attack_specs();
        assert_eq!(specs.len(), 2);
        match &specs[0].method {
            AttackMethod::Stealth { preprocess, control, .. } => {
                assert_eq!(preprocess.iterations, 3);
                assert!(!control);
            }
            m => panic!("{m:?}"),
        }
        assert_ne!(c.hash(), RunConfig::default().hash());
        let e = validate_str("[[attack.spec]]\nmethod = \"warp\"\n", &[]).unwrap_err();
        assert!(e[0].contains("attack.spec[0].method"), "{e:?}");
    }
}
