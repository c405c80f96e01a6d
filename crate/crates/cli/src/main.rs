use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use byzdistill::checks::{self, CheckError};
use byzdistill::config::{ConfigError, ExperimentConfig};
use byzdistill::federation::{self, RunError};
use byzdistill::metrics::{self, Line};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

const EXIT_FAILED_CHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "byzdistill", version, about = "Byzantine attacks and defences for federated distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics as JSON lines.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment for several values of one setting and every seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run numerical checks; `all` selects every check.
    Check {
        #[arg(long, value_delimiter = ',', default_value = "all")]
        names: Vec<String>,
        /// JSON-lines report; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Alpha,
    Clients,
    Rounds,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Clients => "clients",
            Axis::Rounds => "rounds",
        }
    }
}

/// Error carrying the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_CONFIG, error: error.into() }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_RUNTIME, error: error.into() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_config() {
            Failure::config(e)
        } else {
            Failure::runtime(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::Sweep { config, axis, values, out } => cmd_sweep(&config, axis, &values, &out),
        Command::Check { names, out, seed } => cmd_check(&names, out.as_deref(), seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("BDS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("BDS_THREADS must be a positive integer, got `{v}`"))?;
    anyhow::ensure!(n > 0, "BDS_THREADS must be a positive integer, got `{v}`");
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::read(path).map_err(|e| match e {
        ConfigError::Io(io) => Failure::config(anyhow::Error::new(io).context(format!("reading {}", path.display()))),
        other => Failure::config(other),
    })
}

/// Runs `config` and writes its metrics file; returns the final accuracy.
fn execute(config: &ExperimentConfig, out: &Path) -> Result<f64, Failure> {
    let file = File::create(out).with_context(|| format!("creating {}", out.display())).map_err(Failure::runtime)?;
    let mut w = BufWriter::new(file);
    let start = Instant::now();
    let mut write_error: Option<io::Error> = None;
    let outcome = federation::run_with(config, Default::default(), |record| {
        if write_error.is_none() {
            write_error = metrics::write_line(&mut w, &Line::Round(record.clone())).err();
        }
    })?;
    if let Some(e) = write_error {
        return Err(Failure::runtime(e));
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    metrics::write_line(&mut w, &Line::Summary(metrics::summarize(config, &outcome, total_ms)))
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", out.display()))
        .map_err(Failure::runtime)?;
    Ok(outcome.final_accuracy())
}

fn cmd_run(config: &Path, out: &Path) -> Result<u8, Failure> {
    let config = load_config(config)?;
    let acc = execute(&config, out)?;
    eprintln!("final test accuracy {acc:.4}");
    Ok(0)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_sweep(config: &Path, axis: Axis, values: &[String], out: &Path) -> Result<u8, Failure> {
    let base = load_config(config)?;
    // every configuration is validated before anything runs
    let mut jobs = Vec::new();
    for value in values {
        for &seed in &base.seeds {
            let mut c = base.clone();
            c.set(axis.key(), value).map_err(Failure::config)?;
            c.seed = seed;
            c.validate().map_err(|e| Failure::config(anyhow::Error::new(e).context(format!("{}={value}", axis.key()))))?;
            let file = out.join(format!("{}-{}-seed{}.jsonl", axis.key(), value, seed));
            jobs.push((value.as_str(), c, file));
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(Failure::runtime)?;

    let results: Vec<Result<f64, String>> = jobs
        .par_iter()
        .map(|(_, c, file)| execute(c, file).map_err(|f| format!("{:#}", f.error)))
        .collect();

    let mut table = format!("{}\tattack\tdefence\tacc_mean\tacc_std\n", axis.key());
    let mut failures = 0;
    for value in values {
        let mut accs = Vec::new();
        for ((v, c, file), r) in jobs.iter().zip(&results) {
            if v != value {
                continue;
            }
            match r {
                Ok(acc) => accs.push(*acc),
                Err(msg) => {
                    failures += 1;
                    eprintln!("run {} (seed {}) failed: {msg}", file.display(), c.seed);
                }
            }
        }
        let first = &jobs.iter().find(|(v, _, _)| v == value).expect("one job per value").1;
        let (mean, std) = if accs.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&accs) };
        table.push_str(&format!(
            "{value}\t{}\t{}\t{mean:.6}\t{std:.6}\n",
            first.attack.kind.name(),
            metrics::defence_label(first)
        ));
    }
    let table_path = out.join("summary.tsv");
    fs::write(&table_path, table).with_context(|| format!("writing {}", table_path.display())).map_err(Failure::runtime)?;
    if failures > 0 {
        eprintln!("{failures} of {} runs failed", jobs.len());
        return Ok(EXIT_RUNTIME);
    }
    Ok(0)
}

fn cmd_check(names: &[String], out: Option<&Path>, seed: u64) -> Result<u8, Failure> {
    let names: Vec<&str> = names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    let reports = checks::run(&names, seed).map_err(|e| match e {
        CheckError::Unknown(_) => Failure::config(e),
        other => Failure::runtime(other),
    })?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r).map_err(Failure::runtime)?);
        text.push('\n');
        eprintln!("{} {}: measured {:.3e}, bound {:.3e}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.measured, r.bound);
    }
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::runtime)?,
        None => io::stdout().write_all(text.as_bytes()).map_err(Failure::runtime)?,
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { EXIT_FAILED_CHECK })
}
