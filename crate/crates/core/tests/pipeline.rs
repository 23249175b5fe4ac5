use std::path::Path;

use latent_stealth::config::validate_str;
use latent_stealth::pipeline::{Run, Stage, StageOutcome};
use latent_stealth::Error;

const TINY: &str = r#"
seed = 11
[corpus]
image_size = 16
genuine = 48
generated = 48
[vae]
epochs = 1
c1 = 8
c2 = 8
[diffusion]
epochs = 1
width = 16
blocks = 1
time_dim = 16
[prototype]
count = 20
[controlvae]
epochs = 1
[detector]
epochs = 1
[attack]
images = 4
pgd_iterations = 3
surrogates = ["convnet_small"]
"#;

fn open(dir: &Path, overrides: &[&str]) -> Run {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = validate_str(TINY, &overrides).expect("tiny config is valid");
    Run::open(dir, cfg).unwrap()
}

fn png_count(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "png")).count())
        .unwrap_or(0)
}

#[test]
fn stage_without_prerequisites_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = open(dir.path(), &[]);
    match run.run_stage(Stage::TrainVae) {
        Err(Error::Prerequisite { command, .. }) => assert_eq!(command, "synth"),
        other => panic!("expected a prerequisite error, got {other:?}"),
    }
    assert!(!dir.path().join("models/vae.lswt").exists());
}

#[test]
fn full_chain_writes_every_artifact_and_reruns_as_noop() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut run = open(root, &[]);
    run.run_all().unwrap();

    for rel in [
        "run.json",
        "config.toml",
        "corpus/manifest.tsv",
        "models/vae.lswt",
        "models/diffusion.lswt",
        "models/controlvae.lswt",
        "models/detector_convnet_small.lswt",
        "models/detector_convnet_deep.lswt",
        "models/detector_attention_lite.lswt",
        "reports/detector_convnet_small.txt",
        "prototype/prototype.lsnp",
        "prototype/prototype.png",
        "curves/controlvae_val_npl.tsv",
        "attack/results.json",
        "report/metrics.csv",
        "report/asr_grid.csv",
        "report/spectra/genuine.png",
    ] {
        assert!(root.join(rel).exists(), "missing {rel}");
    }
    for attack in ["pgd", "preprocess", "stealth"] {
        assert_eq!(png_count(&root.join("adv").join(attack).join("convnet_small")), 4, "{attack}");
    }
    let csv = std::fs::read_to_string(root.join("report/metrics.csv")).unwrap();
    assert!(csv.starts_with("attack,source,target,asr,psnr,ssim,spectral_l2"));

    let mut again = open(root, &[]);
    for stage in Stage::ALL {
        assert!(matches!(again.run_stage(stage).unwrap(), StageOutcome::UpToDate), "{stage} reran");
    }

    let mut changed = open(root, &["attack.images=3"]);
    for stage in Stage::ALL {
        let fresh = matches!(stage, Stage::Attack | Stage::Report);
        assert_eq!(changed.is_current(stage), !fresh, "{stage}");
    }
    assert!(matches!(changed.run_stage(Stage::Attack).unwrap(), StageOutcome::Completed(_)));
    assert_eq!(png_count(&root.join("adv/stealth/convnet_small")), 3);
}
