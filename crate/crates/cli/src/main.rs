//! `convhom`: configuration-driven experiments for convolution-type energies.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

mod config;
mod output;
mod run;

use config::{load_config, ConfigError, ExperimentConfig};
use output::Manifest;

/// Environment variable holding the worker count.
const WORKERS_ENV: &str = "CONVHOM_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "convhom", version, about = "Nonlocal energies, homogenization and flows from a config file")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Replace the configured seed list by this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Energies over the eps list, with the local limit where available.
    Energy(RunArgs),
    /// Dirichlet minimum problems with affine boundary data.
    Minimize(RunArgs),
    /// One homogenization route over the probe list.
    Homogenize(RunArgs),
    /// Gradient flows, optionally compared with a local reference flow.
    Flow {
        #[command(flatten)]
        args: RunArgs,
        /// Integrator: mm, explicit or reference.
        #[arg(long)]
        integrator: Option<String>,
        /// Initial condition: affine, sine, bump or random.
        #[arg(long)]
        initial: Option<String>,
    },
    /// Point-cloud energies against their continuum target.
    Pointcloud(RunArgs),
    /// Every configured homogenization route over every probe.
    Sweep(RunArgs),
    /// Check a config without running it.
    Validate {
        config: PathBuf,
    },
}

fn workers() -> Result<usize, String> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn prepare(kind: &str, args: &RunArgs, patch: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = load_config(&args.config)?;
    if cfg.experiment != kind {
        return Err(ConfigError::Invalid(vec![format!(
            "experiment: config declares '{}' but the subcommand is '{kind}'",
            cfg.experiment
        )]));
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &args.output {
        cfg.output = o.clone();
    }
    patch(&mut cfg);
    let problems = cfg.violations();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(problems))
    }
}

fn execute(cfg: &ExperimentConfig, workers: usize) -> Result<bool, String> {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| e.to_string())?;
    let out = pool.install(|| run::run(cfg)).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| format!("{}: {e}", cfg.output.display()))?;
    for t in &out.tables {
        t.write(&cfg.output).map_err(|e| format!("{}: {e}", t.name))?;
    }
    let manifest = Manifest::new(cfg, &out.tables, &out.tasks, workers, start.elapsed().as_secs_f64());
    manifest.write(&cfg.output).map_err(|e| e.to_string())?;
    for t in &out.tables {
        println!("wrote {} ({} rows)", cfg.output.join(&t.name).display(), t.len());
    }
    for t in out.tasks.iter().filter(|t| t.error.is_some()) {
        eprintln!("task failed: {}: {}", t.name, t.error.as_deref().unwrap_or(""));
    }
    Ok(manifest.failed_tasks == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = match workers() {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let (kind, args, integrator, initial) = match cli.command {
        Command::Validate { config } => {
            return match load_config(&config) {
                Ok(cfg) => {
                    println!("{}: valid {} experiment", config.display(), cfg.experiment);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprint!("{e}");
                    if !e.to_string().ends_with('\n') {
                        eprintln!();
                    }
                    ExitCode::from(2)
                }
            };
        }
        Command::Energy(a) => ("energy", a, None, None),
        Command::Minimize(a) => ("minimize", a, None, None),
        Command::Homogenize(a) => ("homogenize", a, None, None),
        Command::Pointcloud(a) => ("pointcloud", a, None, None),
        Command::Sweep(a) => ("sweep", a, None, None),
        Command::Flow {
            args,
            integrator,
            initial,
        } => ("flow", args, integrator, initial),
    };
    let cfg = match prepare(kind, &args, |c| {
        if let Some(i) = integrator {
            c.flow.integrator = i;
        }
        if let Some(i) = initial {
            c.probes.initial = i;
        }
    }) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            if !e.to_string().ends_with('\n') {
                eprintln!();
            }
            return ExitCode::from(2);
        }
    };
    match execute(&cfg, workers) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
