use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use momp_ris::dictionary::GridRatios;
use momp_ris::experiment::{Experiment, ExperimentConfig, Mode};
use momp_ris::io::{self, FixRow, PathRow};
use momp_ris::Error;

/// RIS-aided channel estimation and localization experiments.
#[derive(Parser)]
#[command(name = "momp-ris", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// bm-only, ris-only or both.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Side of the square RIS.
    #[arg(long, global = true)]
    ris_size: Option<usize>,
    /// Dictionary oversampling ratio in every dimension.
    #[arg(long, global = true)]
    ratio: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the scene of one trial and write scene.toml and paths.csv.
    Simulate(TrialArg),
    /// Sound one trial and write observation.bin and noiseless.bin.
    Sound(TrialArg),
    /// Estimate paths from an observation of one trial; writes estimates.csv.
    Estimate {
        #[command(flatten)]
        trial: TrialArg,
        /// Observation file (defaults to <out>/observation.bin).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Localize from a path estimate file of one trial; writes fixes.csv.
    Localize {
        #[command(flatten)]
        trial: TrialArg,
        /// Estimates file (defaults to <out>/estimates.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the Monte Carlo experiment.
    Experiment,
    /// Empirical CDF of the errors in a fixes file; writes cdf.csv.
    Cdf {
        /// Fixes file (defaults to <out>/fixes.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrialArg {
    /// Trial index.
    #[arg(long, default_value_t = 0)]
    trial: usize,
}

fn config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &c.mode {
        cfg.mode = mode.parse::<Mode>()?;
    }
    if let Some(trials) = c.trials {
        cfg.trials = trials;
    }
    if let Some(n) = c.ris_size {
        cfg.arrays.ris = [n, n];
    }
    if let Some(r) = c.ratio {
        cfg.dictionary = GridRatios::uniform(r);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_file(c: &Common, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(c.out.join(name))
}

fn input_or(c: &Common, input: &Option<PathBuf>, name: &str) -> PathBuf {
    input.clone().unwrap_or_else(|| c.out.join(name))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = config(c)?;
    let exp = Experiment::new(cfg.clone())?;
    match &cli.command {
        Command::Simulate(t) => {
            let (setup, _) = exp.setup(t.trial)?;
            std::fs::write(out_file(c, "scene.toml")?, setup.scene.to_toml()?)?;
            let mut rows = Vec::new();
            rows.extend(setup.bs_ms.iter().map(|p| PathRow::new("BM", p)));
            rows.extend(setup.bs_ris.iter().map(|p| PathRow::new("BR", p)));
            rows.extend(setup.ris_ms.iter().map(|p| PathRow::new("RM", p)));
            io::save_csv(&out_file(c, "paths.csv")?, &rows)?;
            info!("trial {}: {} paths, t0 = {:e} s", t.trial, rows.len(), setup.t0);
        }
        Command::Sound(t) => {
            let (_, sounding) = exp.sound(t.trial)?;
            io::save_matrix(&out_file(c, "observation.bin")?, &sounding.observation.data)?;
            io::save_matrix(&out_file(c, "noiseless.bin")?, &sounding.noiseless)?;
        }
        Command::Estimate { trial, input } => {
            let path = input_or(c, input, "observation.bin");
            let y = io::load_matrix(&path).with_context(|| format!("reading {}", path.display()))?;
            let (setup, _) = exp.setup(trial.trial)?;
            let (out, estimates, _) = exp.estimate(&setup, &y)?;
            io::save_csv(&out_file(c, "estimates.csv")?, &io::estimate_rows(&estimates))?;
            info!("{} atoms, {} path estimates", out.support.len(), estimates.len());
        }
        Command::Localize { trial, input } => {
            let path = input_or(c, input, "estimates.csv");
            let estimates = io::load_estimates(&path).with_context(|| format!("reading {}", path.display()))?;
            let (setup, _) = exp.setup(trial.trial)?;
            let fixes = exp.localize(&estimates, Some(setup.ms()))?;
            let rows: Vec<FixRow> = fixes.iter().map(|(m, f)| FixRow::new(trial.trial, m, f)).collect();
            io::save_csv(&out_file(c, "fixes.csv")?, &rows)?;
        }
        Command::Experiment => {
            let result = exp.run();
            io::write_experiment(&c.out, &result)?;
            std::fs::write(c.out.join("config.toml"), cfg.to_toml()?)?;
            for s in &result.summary {
                println!(
                    "{:<11} trials {:>4}  failures {:>3}  p50 {:>9.3} m  p80 {:>9.3} m  p90 {:>9.3} m",
                    s.method.as_str(),
                    s.trials,
                    s.failures,
                    s.p50,
                    s.p80,
                    s.p90
                );
            }
        }
        Command::Cdf { input } => {
            let path = input_or(c, input, "fixes.csv");
            let rows: Vec<FixRow> = io::load_csv(&path).with_context(|| format!("reading {}", path.display()))?;
            io::save_csv(&out_file(c, "cdf.csv")?, &io::cdf_rows(&rows)?)?;
        }
    }
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
