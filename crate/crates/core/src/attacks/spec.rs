//! Declarative attack lists.
//!
//! ```toml
//! [[attack]]
//! name = "pgd"
//! method = "pgd"          # none | fgsm | pgd | preprocess | stealth
//! source = "convnet_small"
//! epsilon = "8/255"       # numbers or "a/b" fractions
//! step = "2/255"
//! iterations = 30
//! ```
//!
//! Stealth entries also accept `pre_epsilon`, `pre_step`, `pre_iterations`,
//! `diffusion_steps`, `latent_iterations`, `step_size`, `seed` and `control`.

use toml::{Table, Value};

use super::{AttackMethod, AttackSpec, LatentAttackConfig, PgdConfig};
use crate::detectors::Architecture;
use crate::error::{Error, Result};

/// Reads a float given as a number, an integer, or an `"a/b"` string.
pub(crate) fn float_value(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        Value::String(s) => {
            let s = s.trim();
            match s.split_once('/') {
                Some((a, b)) => {
                    let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
                    (b != 0.0).then_some(a / b)
                }
                None => s.parse().ok(),
            }
        }
        _ => None,
    }
}

struct Reader<'a> {
    table: &'a Table,
    prefix: String,
    errors: Vec<String>,
    used: Vec<&'static str>,
}

impl Reader<'_> {
    fn float(&mut self, key: &'static str, default: f64) -> f64 {
        self.used.push(key);
        match self.table.get(key) {
            None => default,
            Some(v) => float_value(v).unwrap_or_else(|| {
                self.errors.push(format!("{}.{key}: expected a number, got {v}", self.prefix));
                default
            }),
        }
    }

    fn int(&mut self, key: &'static str, default: usize) -> usize {
        self.used.push(key);
        match self.table.get(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as usize,
            Some(v) => {
                self.errors.push(format!("{}.{key}: expected a non-negative integer, got {v}", self.prefix));
                default
            }
        }
    }

    fn boolean(&mut self, key: &'static str, default: bool) -> bool {
        self.used.push(key);
        match self.table.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.errors.push(format!("{}.{key}: expected a boolean, got {v}", self.prefix));
                default
            }
        }
    }

    fn string(&mut self, key: &'static str) -> Option<String> {
        self.used.push(key);
        match self.table.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => {
                self.errors.push(format!("{}.{key}: expected a string, got {v}", self.prefix));
                None
            }
        }
    }
}

/// Parses one `[[attack]]` table; every problem is collected.
pub(crate) fn spec_from_table(
    table: &Table,
    prefix: &str,
    defaults: &AttackDefaults,
) -> std::result::Result<AttackSpec, Vec<String>> {
    let mut r = Reader {
        table,
        prefix: prefix.to_string(),
        errors: Vec::new(),
        used: Vec::new(),
    };
    let method_name = r.string("method");
    let name = r.string("name").or_else(|| method_name.clone());
    let source = match r.string("source") {
        None => Some(Architecture::ConvnetSmall),
        Some(s) => match s.parse::<Architecture>() {
            Ok(a) => Some(a),
            Err(e) => {
                r.errors.push(format!("{prefix}.source: {e}"));
                None
            }
        },
    };
    let method = match method_name.as_deref() {
        None => {
            r.errors.push(format!("{prefix}.method: missing"));
            None
        }
        Some("none") => Some(AttackMethod::None),
        Some("fgsm") => Some(AttackMethod::Fgsm {
            epsilon: r.float("epsilon", defaults.fgsm_epsilon),
        }),
        Some(m @ ("pgd" | "preprocess")) => {
            let base = if m == "pgd" { defaults.pgd } else { defaults.preprocess };
            let cfg = PgdConfig {
                epsilon: r.float("epsilon", base.epsilon),
                step: r.float("step", base.step),
                iterations: r.int("iterations", base.iterations),
            };
            Some(if m == "pgd" {
                AttackMethod::Pgd(cfg)
            } else {
                AttackMethod::Preprocess(cfg)
            })
        }
        Some("stealth") => {
            let p = defaults.preprocess;
            let l = defaults.latent;
            Some(AttackMethod::Stealth {
                preprocess: PgdConfig {
                    epsilon: r.float("pre_epsilon", p.epsilon),
                    step: r.float("pre_step", p.step),
                    iterations: r.int("pre_iterations", p.iterations),
                },
                latent: LatentAttackConfig {
                    diffusion_steps: r.int("diffusion_steps", l.diffusion_steps),
                    iterations: r.int("latent_iterations", l.iterations),
                    step_size: r.float("step_size", l.step_size),
                    seed: r.int("seed", l.seed as usize) as u64,
                },
                control: r.boolean("control", true),
            })
        }
        Some(other) => {
            r.errors.push(format!("{prefix}.method: unknown attack method {other:?}"));
            None
        }
    };
    for key in table.keys() {
        if !r.used.contains(&key.as_str()) {
            r.errors.push(format!("{prefix}.{key}: unknown key"));
        }
    }
    if let Some(m) = &method {
        let check = match m {
            AttackMethod::None => Ok(()),
            AttackMethod::Fgsm { epsilon } => PgdConfig {
                epsilon: *epsilon,
                step: 1.0,
                iterations: 1,
            }
            .validate(),
            AttackMethod::Pgd(c) | AttackMethod::Preprocess(c) => c.validate(),
            AttackMethod::Stealth { preprocess, latent, .. } => preprocess.validate().and_then(|_| {
                if latent.step_size.is_finite() && latent.step_size >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("step_size {} must be non-negative", latent.step_size)))
                }
            }),
        };
        if let Err(e) = check {
            r.errors.push(format!("{prefix}: {e}"));
        }
    }
    match (r.errors.is_empty(), name, method, source) {
        (true, Some(name), Some(method), Some(source)) => Ok(AttackSpec { name, method, source }),
        _ => Err(r.errors),
    }
}

/// Parameters applied to spec entries that leave a knob unset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackDefaults {
    pub fgsm_epsilon: f64,
    pub pgd: PgdConfig,
    pub preprocess: PgdConfig,
    pub latent: LatentAttackConfig,
}

impl Default for AttackDefaults {
    fn default() -> Self {
        Self {
            fgsm_epsilon: 8.0 / 255.0,
            pgd: PgdConfig::baseline(),
            preprocess: PgdConfig::preprocess(),
            latent: LatentAttackConfig::default(),
        }
    }
}

/// Parses an attack spec file.
pub fn parse_attack_specs(text: &str, defaults: &AttackDefaults) -> Result<Vec<AttackSpec>> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut errors = Vec::new();
    let mut specs = Vec::new();
    for key in table.keys().filter(|k| *k != "attack") {
        errors.push(format!("{key}: unknown key"));
    }
    match table.get("attack") {
        None => {}
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                let prefix = format!("attack[{i}]");
                match item {
                    Value::Table(t) => match spec_from_table(t, &prefix, defaults) {
                        Ok(s) => specs.push(s),
                        Err(e) => errors.extend(e),
                    },
                    _ => errors.push(format!("{prefix}: expected a table")),
                }
            }
        }
        Some(_) => errors.push("attack: expected an array of tables".into()),
    }
    check_unique(&specs, &mut errors);
    if errors.is_empty() {
        Ok(specs)
    } else {
        Err(Error::Config(errors.join("; ")))
    }
}

pub(crate) fn check_unique(specs: &[AttackSpec], errors: &mut Vec<String>) {
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b.name == a.name && b.source == a.source) {
            errors.push(format!("duplicate attack {} with source {}", a.name, a.source));
        }
    }
}

/// `none`, `fgsm`, `pgd`, `preprocess` and `stealth` for each surrogate.
pub fn default_attack_specs(surrogates: &[Architecture], defaults: &AttackDefaults) -> Vec<AttackSpec> {
    let mut out = Vec::new();
    for s in surrogates {
        let methods = [
            ("none", AttackMethod::None),
            (
                "fgsm",
                AttackMethod::Fgsm {
                    epsilon: defaults.fgsm_epsilon,
                },
            ),
            ("pgd", AttackMethod::Pgd(defaults.pgd)),
            ("preprocess", AttackMethod::Preprocess(defaults.preprocess)),
            (
                "stealth",
                AttackMethod::Stealth {
                    preprocess: defaults.preprocess,
                    latent: defaults.latent,
                    control: true,
                },
            ),
        ];
        out.extend(methods.into_iter().map(|(name, method)| AttackSpec {
            name: name.to_string(),
            method,
            source: *s,
        }));
    }
    out
}
