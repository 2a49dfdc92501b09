//! `hbf-sweep`: Monte Carlo throughput sweep writing one CSV.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 more than 1% of trials failed in some row.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hbf_core::beamcore::SelectionMode;
use hbf_core::codebook::CodebookKind;
use hbf_core::harness::{emit_csv, run_sweep, SystemConfig};
use hbf_core::HbfError;

#[derive(Parser, Debug)]
#[command(name = "hbf-sweep", version, about = "Hybrid beamforming throughput sweep")]
struct Cli {
    /// Flat `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// SNR points in dB, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr_db: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// orthogonal, weak or strong; comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_codebook)]
    codebook: Option<Vec<CodebookKind>>,
    /// eig, fro or det; comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_criterion)]
    criterion: Option<Vec<SelectionMode>>,
    /// Candidate counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Use noise-free couplings for beam selection.
    #[arg(long)]
    noise_free: bool,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_codebook(s: &str) -> Result<CodebookKind, String> {
    CodebookKind::parse(s).ok_or_else(|| format!("unknown codebook {s:?}"))
}

fn parse_criterion(s: &str) -> Result<SelectionMode, String> {
    SelectionMode::parse(s).ok_or_else(|| format!("unknown criterion {s:?}"))
}

fn build_config(cli: &Cli) -> hbf_core::Result<SystemConfig> {
    let mut cfg = match &cli.config {
        Some(p) => SystemConfig::from_file(p)?,
        None => SystemConfig::default(),
    };
    if let Some(v) = &cli.snr_db {
        cfg.snr_grid_db = v.clone();
    }
    if let Some(v) = cli.trials {
        cfg.trials = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = &cli.codebook {
        cfg.codebooks = v.clone();
    }
    if let Some(v) = &cli.criterion {
        cfg.criteria = v.clone();
    }
    if let Some(v) = &cli.m {
        cfg.m_values = v.clone();
    }
    if cli.noise_free {
        cfg.noise_free_training = true;
    }
    if let Some(v) = cli.workers {
        cfg.workers = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &HbfError) -> u8 {
    match e {
        HbfError::Config(_) | HbfError::Parse { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("hbf-sweep: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let result = match run_sweep(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("hbf-sweep: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    for (trial, msg) in &result.failed_trials {
        eprintln!("hbf-sweep: trial {trial} failed: {msg}");
    }
    let (failed, total) = result.failure_counts();
    if failed > 0 {
        eprintln!("hbf-sweep: {failed} of {total} evaluations failed and were excluded");
    }
    if let Err(e) = emit_csv(&result, &cli.out) {
        eprintln!("hbf-sweep: {e}");
        return ExitCode::from(exit_code(&e));
    }
    if result.failure_budget_exceeded() {
        eprintln!("hbf-sweep: failure budget exceeded (more than 1% of trials)");
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
