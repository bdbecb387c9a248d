//! Command-line front end: one JSON config, six pipeline stages, one output
//! directory per run.

pub mod config;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{ItoError, Result};
use config::RunConfig;
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "itolab",
    version,
    about = "Langevin reference data, transition-surrogate training, and kinetics analysis \
             for desk-scale systems"
)]
struct Cli {
    /// Path to a JSON run configuration (mutually exclusive with --preset).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in configuration: ou, double_well, mueller_brown, bead_chain_8.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Output directory; every artifact the run writes lives under it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for ensemble stages. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    workers: usize,
    #[command(subcommand)]
    cmd: Stage,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Stage {
    /// Generate reference Langevin trajectories.
    Simulate,
    /// Fit the transition surrogate on the reference data.
    Train,
    /// Draw one-step transitions from the trained surrogate.
    Sample,
    /// Roll out a surrogate trajectory ensemble.
    Rollout,
    /// Compare surrogate and reference: TICA, free-energy surfaces, MSM rates.
    Analyze,
    /// Rate-versus-temperature sweep with an Arrhenius fit.
    Sweep,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Rollout => "rollout",
            Stage::Analyze => "analyze",
            Stage::Sweep => "sweep",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => {
            return Err(ItoError::ConfigInvalid {
                violations: vec!["--config and --preset are mutually exclusive".into()],
            })
        }
        (None, None) => {
            return Err(ItoError::ConfigInvalid {
                violations: vec!["either --config PATH or --preset NAME is required".into()],
            })
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ItoError::io(path.display().to_string(), e))?;
            RunConfig::parse(&text)?
        }
        (None, Some(name)) => config::preset(name)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<RunManifest> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_ref().ok_or_else(|| ItoError::ConfigInvalid {
        violations: vec!["--out DIR is required".into()],
    })?;
    std::fs::create_dir_all(out).map_err(|e| ItoError::io(out.display().to_string(), e))?;
    let stage = match cli.cmd {
        Stage::Simulate => stages::cmd_simulate,
        Stage::Train => stages::cmd_train,
        Stage::Sample => stages::cmd_sample,
        Stage::Rollout => stages::cmd_rollout,
        Stage::Analyze => stages::cmd_analyze,
        Stage::Sweep => stages::cmd_sweep,
    };
    let mut man = stage(&cfg, out, cli.workers.max(1))?;
    let path = man.write(out)?;
    log::info!("{} manifest at {}", man.stage, path.display());
    Ok(man)
}

/// CLI entry point; returns the process exit code. Errors go to stderr as a
/// single JSON record so callers can parse failures mechanically.
pub fn run() -> i32 {
    let env = env_logger::Env::new().filter("ITOLAB_LOG");
    let _ = env_logger::Builder::from_env(env).try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let stage = cli.cmd.name();
    match dispatch(&cli) {
        Ok(man) => {
            println!(
                "{stage} ok: {} artifacts, config {}",
                man.artifacts.len(),
                &man.config_hash[..12]
            );
            0
        }
        Err(e) => {
            let record = serde_json::json!({
                "stage": stage,
                "error": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{record}");
            e.exit_code()
        }
    }
}
