//! Metrics (attack success rate, PSNR, SSIM, spectral distance) and the
//! CSV/spectrum-panel report written after an attack suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackRun, SuiteResult};
use crate::error::{Error, IoContext, Result};
use crate::spectral::{self, DenoiserFilter};

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = 100.0;

pub const CSV_HEADER: &str = "attack,source,target,asr,psnr,ssim,spectral_l2";

/// Pre- and post-attack probabilities of "generated" for one image on one
/// target detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub pre: f64,
    pub post: f64,
}

/// Percentage of pre-attack true positives that the target classifies as
/// genuine after the attack. Images the detector already missed are not
/// counted; with no true positives at all the rate is 0.
pub fn attack_success_rate(outcomes: &[Outcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Config("attack success rate needs at least one result".into()));
    }
    let positives: Vec<&Outcome> = outcomes
        .iter()
        .filter(|o| crate::detectors::predicts_generated(o.pre))
        .collect();
    if positives.is_empty() {
        return Ok(0.0);
    }
    let evaded = positives
        .iter()
        .filter(|o| !crate::detectors::predicts_generated(o.post))
        .count();
    Ok(100.0 * evaded as f64 / positives.len() as f64)
}

fn same_shape(x: &Array3<f32>, y: &Array3<f32>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", y.dim())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` for images on `[0, 1]`.
pub fn psnr(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    same_shape(x, y)?;
    let mse = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid window positions only.
fn filter_valid(a: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..k).map(|i| g[i] * a[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..k).map(|i| g[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

/// Single-scale SSIM, 11×11 Gaussian window (σ = 1.5), valid positions only,
/// averaged over the map and then over channels.
pub fn ssim(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    same_shape(x, y)?;
    let (h, w, c) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("at least {SSIM_WINDOW}×{SSIM_WINDOW}"), format!("{h}×{w}")));
    }
    let g = gaussian_1d();
    let mut total = 0.0;
    for ch in 0..c {
        let a = x.index_axis(Axis(2), ch).mapv(|v| v as f64);
        let b = y.index_axis(Axis(2), ch).mapv(|v| v as f64);
        let mu_a = filter_valid(&a, &g);
        let mu_b = filter_valid(&b, &g);
        let aa = filter_valid(&(&a * &a), &g);
        let bb = filter_valid(&(&b * &b), &g);
        let ab = filter_valid(&(&a * &b), &g);
        let mut sum = 0.0;
        for ((((ma, mb), saa), sbb), sab) in mu_a.iter().zip(mu_b.iter()).zip(aa.iter()).zip(bb.iter()).zip(ab.iter()) {
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub attack: String,
    pub source: String,
    pub target: String,
    pub asr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub spectral_l2: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            self.attack, self.source, self.target, self.asr, self.psnr, self.ssim, self.spectral_l2
        )
    }
}

/// Multiplier applied to spectral distances in metric rows, so that the
/// four-decimal CSV columns resolve them.
pub const SPECTRAL_SCALE: f64 = 1e4;

/// Quality and spectral metrics of one attack run (independent of target).
#[derive(Debug, Clone, PartialEq)]
pub struct RunQuality {
    pub psnr: f64,
    pub ssim: f64,
    pub spectral_l2: f64,
}

pub fn run_quality(run: &AttackRun, genuine: &[&Array3<f32>], filter: &DenoiserFilter) -> Result<RunQuality> {
    let ok: Vec<_> = run.outcomes.iter().filter(|o| o.error.is_none()).collect();
    if ok.is_empty() {
        return Ok(RunQuality {
            psnr: f64::NAN,
            ssim: f64::NAN,
            spectral_l2: f64::NAN,
        });
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for o in &ok {
        p += psnr(&o.original, &o.adversarial)?;
        s += ssim(&o.original, &o.adversarial)?;
    }
    let adv: Vec<&Array3<f32>> = ok.iter().map(|o| &o.adversarial).collect();
    let l2 = spectral::spectral_l2(&adv, genuine, filter)?;
    Ok(RunQuality {
        psnr: p / ok.len() as f64,
        ssim: s / ok.len() as f64,
        spectral_l2: l2 * SPECTRAL_SCALE,
    })
}

/// One row per (attack, source, target), in suite order and target order.
pub fn metric_rows(suite: &SuiteResult, genuine: &[&Array3<f32>], filter: &DenoiserFilter) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for run in &suite.runs {
        let q = run_quality(run, genuine, filter)?;
        for target in &suite.targets {
            let outcomes: Vec<Outcome> = run
                .outcomes
                .iter()
                .filter(|o| o.error.is_none())
                .filter_map(|o| o.scores.get(target).copied())
                .collect();
            let asr = if outcomes.is_empty() {
                f64::NAN
            } else {
                attack_success_rate(&outcomes)?
            };
            rows.push(MetricRow {
                attack: run.spec.name.clone(),
                source: run.spec.source.id().to_string(),
                target: target.clone(),
                asr,
                psnr: q.psnr,
                ssim: q.ssim,
                spectral_l2: q.spectral_l2,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Files written by [`build_report`] and the artifacts that were missing.
#[derive(Debug, Clone, Default)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub gaps: Vec<String>,
}

/// Writes `metrics.csv`, one ASR grid per attack (`asr_<attack>.csv`),
/// spectrum panels for the genuine set and every attack, and `summary.txt`.
pub fn build_report(
    suite: &SuiteResult,
    genuine: &[&Array3<f32>],
    filter: &DenoiserFilter,
    out_dir: &Path,
) -> Result<ReportOutput> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut out = ReportOutput::default();
    let rows = if genuine.is_empty() {
        out.gaps.push("no genuine reference images for spectral metrics".into());
        Vec::new()
    } else {
        metric_rows(suite, genuine, filter)?
    };
    let path = out_dir.join("metrics.csv");
    fs::write(&path, rows_to_csv(&rows)).at(&path)?;
    out.files.push(path);

    // grid: rows = (attack, source), columns = targets
    let mut grid = format!("attack,source,{}\n", suite.targets.join(","));
    for run in &suite.runs {
        let _ = write!(grid, "{},{}", run.spec.name, run.spec.source.id());
        for t in &suite.targets {
            let asr = rows
                .iter()
                .find(|r| r.attack == run.spec.name && r.source == run.spec.source.id() && &r.target == t)
                .map(|r| r.asr)
                .unwrap_or(f64::NAN);
            let _ = write!(grid, ",{asr:.4}");
        }
        grid.push('\n');
    }
    let path = out_dir.join("asr_grid.csv");
    fs::write(&path, grid).at(&path)?;
    out.files.push(path);

    let panels = out_dir.join("spectra");
    if !genuine.is_empty() {
        let p = panels.join("genuine.png");
        spectral::render_spectrum(&spectral::mean_spectrum(genuine, filter)?, true, &p)?;
        out.files.push(p);
    }
    for run in &suite.runs {
        let adv: Vec<&Array3<f32>> = run.outcomes.iter().filter(|o| o.error.is_none()).map(|o| &o.adversarial).collect();
        if adv.is_empty() {
            out.gaps.push(format!("{} / {}: no adversarial images", run.spec.name, run.spec.source.id()));
            continue;
        }
        let p = panels.join(format!("{}__{}.png", run.spec.name, run.spec.source.id()));
        spectral::render_spectrum(&spectral::mean_spectrum(&adv, filter)?, true, &p)?;
        out.files.push(p);
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "runs\t{}", suite.runs.len());
    let _ = writeln!(summary, "targets\t{}", suite.targets.join(","));
    for run in &suite.runs {
        let failed = run.outcomes.iter().filter(|o| o.error.is_some()).count();
        let _ = writeln!(
            summary,
            "run\t{}\t{}\timages={}\tfailed={}",
            run.spec.name,
            run.spec.source.id(),
            run.outcomes.len(),
            failed
        );
    }
    for g in &out.gaps {
        let _ = writeln!(summary, "gap\t{g}");
    }
    let path = out_dir.join("summary.txt");
    fs::write(&path, summary).at(&path)?;
    out.files.push(path);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn o(pre: f64, post: f64) -> Outcome {
        Outcome { pre, post }
    }

    #[test]
    fn asr_rules() {
        assert_eq!(attack_success_rate(&[o(0.9, 0.1), o(0.8, 0.2)]).unwrap(), 100.0);
        assert_eq!(attack_success_rate(&[o(0.9, 0.1), o(0.8, 0.2), o(0.7, 0.4), o(0.9, 0.6)]).unwrap(), 75.0);
        // pre-attack misses are excluded; a tie counts as genuine
        assert_eq!(attack_success_rate(&[o(0.2, 0.1), o(0.9, 0.5)]).unwrap(), 100.0);
        assert_eq!(attack_success_rate(&[o(0.5, 0.9)]).unwrap(), 0.0);
        assert!(matches!(attack_success_rate(&[]), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn asr_permutation_invariant(v in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let a: Vec<Outcome> = v.iter().map(|(p, q)| o(*p, *q)).collect();
            let mut b = a.clone();
            b.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let r = attack_success_rate(&a).unwrap();
            prop_assert_eq!(r, attack_success_rate(&b).unwrap());
            prop_assert!((0.0..=100.0).contains(&r));
        }

        #[test]
        fn psnr_ssim_symmetric(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array3::from_shape_fn((12, 13, 2), |_| rng.random_range(0.0f32..1.0));
            let y = Array3::from_shape_fn((12, 13, 2), |_| rng.random_range(0.0f32..1.0));
            prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
            let s = ssim(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let z = Array3::<f32>::zeros((4, 4, 3));
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_IDENTICAL);
        let h = Array3::<f32>::from_elem((4, 4, 3), 0.5);
        assert!((psnr(&z, &h).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&z, &Array3::zeros((4, 4, 1))).is_err());
    }

    #[test]
    fn ssim_of_constant_block_and_its_inverse() {
        // one valid window; both images constant, so every variance is zero
        let one = Array3::<f32>::from_elem((11, 11, 1), 1.0);
        let zero = Array3::<f32>::zeros((11, 11, 1));
        let expect = C1 / (1.0 + C1);
        assert!((ssim(&one, &zero).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_binary_image_direct_formula() {
        // left half white, right half black, against its inverse; computed
        // with an explicit 2-D window sum over the single valid position
        let x = Array3::from_shape_fn((11, 11, 1), |(_, c, _)| if c < 5 { 1.0f32 } else { 0.0 });
        let y = x.mapv(|v| 1.0 - v);
        let g = gaussian_1d();
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..11 {
            for j in 0..11 {
                let w = g[i] * g[j];
                let (a, b) = (x[[i, j, 0]] as f64, y[[i, j, 0]] as f64);
                ma += w * a;
                mb += w * b;
                saa += w * a * a;
                sbb += w * b * b;
                sab += w * a * b;
            }
        }
        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        let expect = ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        assert!((ssim(&x, &y).unwrap() - expect).abs() < 1e-12);
        assert!(expect < 0.0);
        assert!(ssim(&Array3::zeros((8, 8, 1)), &Array3::zeros((8, 8, 1))).is_err());
    }

    #[test]
    fn csv_formatting() {
        let r = MetricRow {
            attack: "pgd".into(),
            source: "convnet_small".into(),
            target: "convnet_deep".into(),
            asr: 12.5,
            psnr: 30.123456,
            ssim: 0.9,
            spectral_l2: 0.00001,
        };
        assert_eq!(r.csv_line(), "pgd,convnet_small,convnet_deep,12.5000,30.1235,0.9000,0.0000");
        assert_eq!(rows_to_csv(&[]), format!("{CSV_HEADER}\n"));
    }
}
