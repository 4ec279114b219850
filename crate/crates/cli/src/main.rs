//! `flcarbon`: run/sweep/validate front end over the simulator core.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 runtime
//! divergence. Logging is controlled by `FLCARBON_LOG={error,warn,info,debug}`.

mod io;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flcarbon_core::harness::{self, expand_sweep, RunConfig, RunOutput, StopReason, SweepSpec};

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "flcarbon", version, about = "Deterministic FL simulator with carbon accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write rounds.csv + summary.json.
    Run {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Training data CSV (feature columns + integer label, header row);
        /// requires --val-data and replaces the synthetic dataset.
        #[arg(long, requires = "val_data")]
        train_data: Option<PathBuf>,
        /// Validation data CSV in the same format.
        #[arg(long, requires = "train_data")]
        val_data: Option<PathBuf>,
        /// Carbon-intensity schedule CSV (entity_id, start_time_s,
        /// intensity_kg_per_kwh); entity 0 is the parameter server.
        #[arg(long)]
        ci_schedule: Option<PathBuf>,
    },
    /// Expand a sweep grid, run every cell, and write sweep.csv plus
    /// per-cell subdirectories.
    Sweep {
        /// TOML sweep configuration (base run config under [base]).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Maximum parallel grid cells. Results are identical for any value.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Parse and validate a run config, echoing the normalized effective
    /// config (defaults filled in) to stdout.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLCARBON_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, seed, train_data, val_data, ci_schedule } => {
            cmd_run(&config, &out, seed, train_data.as_deref(), val_data.as_deref(), ci_schedule.as_deref())
        }
        Command::Sweep { config, out, jobs } => cmd_sweep(&config, &out, jobs),
        Command::Validate { config } => cmd_validate(&config),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let config: RunConfig = read_toml(path)?;
    config.validate().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(config)
}

fn cmd_run(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    train_data: Option<&Path>,
    val_data: Option<&Path>,
    ci_schedule: Option<&Path>,
) -> Result<u8> {
    let mut config = load_run_config(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(path) = ci_schedule {
        io::apply_schedule_csv(path, &mut config)?;
        config.validate().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    }

    let output = match (train_data, val_data) {
        (Some(train_path), Some(val_path)) => {
            let train =
                io::load_dataset_csv(train_path, config.model.input_dim, config.model.n_classes)?;
            let val =
                io::load_dataset_csv(val_path, config.model.input_dim, config.model.n_classes)?;
            harness::run_with_dataset(&config, &train, &val)
        }
        _ => harness::run(&config),
    }
    .map_err(|e| anyhow::anyhow!("run failed: {e}"))?;

    write_run_outputs(out, &output, &config)?;
    if output.summary.stop_reason == StopReason::Diverged {
        eprintln!("run diverged after {} rounds; partial logs written", output.summary.rounds_executed);
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

fn write_run_outputs(out: &Path, output: &RunOutput, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    io::write_rounds_csv(&out.join("rounds.csv"), output)?;
    io::write_summary_json(&out.join("summary.json"), output, config)?;
    Ok(())
}

fn cmd_sweep(config_path: &Path, out: &Path, jobs: usize) -> Result<u8> {
    let spec: SweepSpec = read_toml(config_path)?;
    let cells = expand_sweep(&spec).map_err(|e| anyhow::anyhow!("{}: {e}", config_path.display()))?;

    // Work-steal cells across at most `jobs` threads; results land in index
    // order so outputs are byte-identical regardless of parallelism.
    let jobs = jobs.max(1).min(cells.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<flcarbon_core::Result<RunOutput>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                *slots[i].lock().unwrap() = Some(harness::run(&cell.config));
            });
        }
    });

    let mut results = Vec::with_capacity(cells.len());
    for (cell, slot) in cells.into_iter().zip(slots) {
        let output = slot
            .into_inner()
            .unwrap()
            .expect("every cell executed")
            .map_err(|e| anyhow::anyhow!("cell {} failed: {e}", cell.index))?;
        results.push((cell, output));
    }

    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    for (cell, output) in &results {
        let dir = out.join(format!("cell_{:05}", cell.index));
        write_run_outputs(&dir, output, &cell.config)?;
    }
    io::write_sweep_csv(&out.join("sweep.csv"), &results)?;
    Ok(EXIT_OK)
}

fn cmd_validate(config_path: &Path) -> Result<u8> {
    let config = load_run_config(config_path)?;
    let normalized = toml::to_string_pretty(&config).context("cannot serialize config")?;
    // Round-trip guard: the echo must parse back to the same config.
    let reparsed: RunConfig = toml::from_str(&normalized).context("normalized echo does not re-parse")?;
    if reparsed != config {
        bail!("normalized echo does not round-trip");
    }
    print!("{normalized}");
    Ok(EXIT_OK)
}
