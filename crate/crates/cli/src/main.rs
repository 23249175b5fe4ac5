use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latent_stealth::config::validate_config;
use latent_stealth::pipeline::{Run, Stage, StageOutcome};
use latent_stealth::Error;

/// Latent-space adversarial stealth on a toy generated-image corpus.
#[derive(Parser, Debug)]
#[command(name = "stealth", version)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory holding all artifacts of the run.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,

    /// Dotted-key override such as `attack.images=50`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Render the genuine toy corpus.
    Synth,
    /// Train the image autoencoder.
    TrainVae,
    /// Train the latent denoiser.
    TrainDiffusion,
    /// Sample the generated half of the corpus.
    Generate,
    /// Build the genuine noise prototype.
    Prototype,
    /// Train the control branch of the decoder.
    TrainControlvae,
    /// Train the detector family.
    TrainDetector,
    /// Run the attack grid against the detectors.
    Attack,
    /// Write metrics, grids and spectra.
    Report,
    /// Run every stage in order, skipping completed ones.
    All,
    /// Check the configuration and print it normalized.
    Validate,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::TrainVae => Stage::TrainVae,
            Command::TrainDiffusion => Stage::TrainDiffusion,
            Command::Generate => Stage::Generate,
            Command::Prototype => Stage::Prototype,
            Command::TrainControlvae => Stage::TrainControlvae,
            Command::TrainDetector => Stage::TrainDetector,
            Command::Attack => Stage::Attack,
            Command::Report => Stage::Report,
            Command::All | Command::Validate => return None,
        })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = validate_config(cli.config.as_deref(), &overrides)?;
    if let Command::Validate = cli.command {
        println!("{}", config.canonical_json());
        return Ok(());
    }
    let mut run = Run::open(&cli.run_dir, config)?;
    let stages = match cli.command.stage() {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    for stage in stages {
        match run.run_stage(stage)? {
            StageOutcome::UpToDate => println!("{stage}: up to date"),
            StageOutcome::Completed(files) => {
                println!("{stage}: done");
                for f in files {
                    println!("  {}", cli.run_dir.join(f).display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
