//! Monte Carlo sweeps over SNR, codebook, selection criterion and candidate
//! count, with deterministic seeding and CSV output.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::beamcore::{
    digital_beamforming, estimate_effective_channel, initial_beam_selection, CandidateSets,
    CandidateTable, SelectionMode,
};
use crate::channel::{sample_channel, ChannelConfig, ChannelRealization, LinkDims, PhaseModel};
use crate::codebook::{Codebook, CodebookKind};
use crate::error::{HbfError, Result};
use crate::metrics::{
    audit_power_constraints, channel_eigenvalues, equal_power, fully_digital_from_eigenvalues,
    gamma_from_sigma2, rate_report_from_couplings, sigma2_from_snr_db,
};
use crate::reference::reference_beamformers;
use crate::training::{noise_free_couplings, unit_noise, CouplingTensor};
use crate::ComplexMatrix;

pub const CSV_HEADER: &str =
    "snr_db,codebook,criterion,m,trials,mean_rate,dbf_mean_rate,normalized_rate,ci95_halfwidth";

/// Label used in the `criterion` column for the OMP reference rows.
pub const REFERENCE_LABEL: &str = "omp";

/// Beamformer residual tolerance used when auditing every selection.
pub const AUDIT_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub n_rf: usize,
    pub n_s: usize,
    pub subcarriers: usize,
    /// Candidate counts; each value yields its own rows.
    pub m_values: Vec<usize>,
    pub snr_grid_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub codebooks: Vec<CodebookKind>,
    pub criteria: Vec<SelectionMode>,
    pub noise_free_training: bool,
    /// Adds OMP reference rows to the sweep.
    pub reference: bool,
    /// Worker threads; 0 lets the thread pool decide.
    pub workers: usize,
    pub channel: ChannelConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_t: 32,
            n_r: 32,
            n_rf: 2,
            n_s: 2,
            subcarriers: 512,
            m_values: vec![2, 3, 4, 5],
            snr_grid_db: (0..11).map(|i| -20.0 + 5.0 * i as f64).collect(),
            trials: 500,
            seed: 1,
            codebooks: vec![CodebookKind::Orthogonal],
            criteria: vec![SelectionMode::Eig],
            noise_free_training: false,
            reference: true,
            workers: 0,
            channel: ChannelConfig::default(),
        }
    }
}

fn parse_list<T>(value: &str, parse: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect();
    items.filter(|v| !v.is_empty())
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

impl SystemConfig {
    /// Applies one `key = value` setting. Lists are comma separated.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let bad = || format!("invalid value {v:?} for {key}");
        fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
            s.trim().parse().ok()
        }
        match key.trim() {
            "n_t" => self.n_t = num(v).ok_or_else(bad)?,
            "n_r" => self.n_r = num(v).ok_or_else(bad)?,
            "n_rf" => self.n_rf = num(v).ok_or_else(bad)?,
            "n_s" => self.n_s = num(v).ok_or_else(bad)?,
            "k" | "subcarriers" => self.subcarriers = num(v).ok_or_else(bad)?,
            "m" => self.m_values = parse_list(v, num).ok_or_else(bad)?,
            "snr_db" | "snr_grid_db" => self.snr_grid_db = parse_list(v, num).ok_or_else(bad)?,
            "trials" => self.trials = num(v).ok_or_else(bad)?,
            "seed" => self.seed = num(v).ok_or_else(bad)?,
            "codebook" => self.codebooks = parse_list(v, CodebookKind::parse).ok_or_else(bad)?,
            "criterion" => self.criteria = parse_list(v, SelectionMode::parse).ok_or_else(bad)?,
            "noise_free" | "noise_free_training" => self.noise_free_training = parse_bool(v).ok_or_else(bad)?,
            "reference" => self.reference = parse_bool(v).ok_or_else(bad)?,
            "workers" => self.workers = num(v).ok_or_else(bad)?,
            "clusters" => self.channel.num_clusters = num(v).ok_or_else(bad)?,
            "rays" => self.channel.rays_per_cluster = num(v).ok_or_else(bad)?,
            "los_nlos_ratio" => self.channel.los_nlos_power_ratio = num(v).ok_or_else(bad)?,
            "asd_deg" => self.channel.asd_deg = num(v).ok_or_else(bad)?,
            "asa_deg" => self.channel.asa_deg = num(v).ok_or_else(bad)?,
            "ray_offsets" => self.channel.ray_offsets = parse_list(v, num).ok_or_else(bad)?,
            "max_delay" => self.channel.max_delay = num(v).ok_or_else(bad)?,
            "phase_model" => self.channel.phase_model = PhaseModel::parse(v).ok_or_else(bad)?,
            "avg_power" => self.channel.avg_power = num(v).ok_or_else(bad)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Parses flat `key = value` text on top of the defaults. `#` starts a
    /// comment; unknown keys are errors.
    pub fn from_text(text: &str, source: &Path) -> Result<Self> {
        let mut cfg = SystemConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| HbfError::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            cfg.set(key, value).map_err(parse_err)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HbfError::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn link_dims(&self) -> LinkDims {
        LinkDims {
            n_t: self.n_t,
            n_r: self.n_r,
            n_rf: self.n_rf,
            subcarriers: self.subcarriers,
        }
    }

    pub fn max_m(&self) -> usize {
        self.m_values.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HbfError::Config(m));
        if self.n_t == 0 || self.n_r == 0 {
            return fail("antenna counts must be positive".into());
        }
        if self.n_s == 0 || self.n_s > self.n_rf {
            return fail(format!("need 1 <= n_s <= n_rf, got n_s={} n_rf={}", self.n_s, self.n_rf));
        }
        if self.subcarriers == 0 {
            return fail("k must be at least 1".into());
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.m_values.is_empty() || self.snr_grid_db.is_empty() {
            return fail("m and snr_db lists must be non-empty".into());
        }
        if self.codebooks.is_empty() || self.criteria.is_empty() {
            return fail("codebook and criterion lists must be non-empty".into());
        }
        if self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return fail("snr_db values must be finite".into());
        }
        for &kind in &self.codebooks {
            let n_f = kind.build(self.n_t)?.num_beams();
            let n_w = kind.build(self.n_r)?.num_beams();
            for &m in &self.m_values {
                if m < self.n_rf || m > n_f.min(n_w) {
                    return fail(format!(
                        "need n_rf <= m <= min(N_F, N_W) = {} for codebook {}, got m={m} n_rf={}",
                        n_f.min(n_w),
                        kind.name(),
                        self.n_rf
                    ));
                }
            }
        }
        self.channel.validate()?;
        if self.channel.num_clusters * self.channel.rays_per_cluster < self.n_rf {
            return fail("fewer propagation paths than RF chains".into());
        }
        Ok(())
    }

    /// Seed of trial `trial_index`.
    pub fn trial_seed(&self, trial_index: usize) -> u64 {
        self.seed ^ trial_index as u64
    }
}

/// Identifies one method configuration in a sweep.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub codebook: CodebookKind,
    /// Criterion name, or [`REFERENCE_LABEL`].
    pub criterion: String,
    pub m: usize,
}

type Cells = Vec<(CellKey, Vec<std::result::Result<f64, String>>)>;

/// Rates of every method for one channel draw.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRates {
    pub trial_index: usize,
    /// Fully digital rate per SNR point.
    pub dbf: Vec<f64>,
    /// Per cell, the rate per SNR point; `Err` holds the failure message.
    pub cells: Cells,
    /// Largest power-constraint residual over all proposed-method selections.
    pub worst_audit_residual: f64,
}

impl TrialRates {
    pub fn cell(&self, key: &CellKey) -> Option<&[std::result::Result<f64, String>]> {
        self.cells.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_slice())
    }
}

fn training_seed(trial_seed: u64, codebook: CodebookKind) -> u64 {
    // Distinct noise per codebook; splitmix64 finalizer to decorrelate.
    let mut z = trial_seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(codebook as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the channel of trial `trial_index`.
pub fn trial_channel(cfg: &SystemConfig, trial_index: usize) -> Result<ChannelRealization> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trial_seed(trial_index));
    sample_channel(cfg.link_dims(), &cfg.channel, &mut rng)
}

/// Algorithm-1 selection for one candidate count and criterion from a
/// prebuilt table; returns the rate and the audit residual.
#[allow(clippy::too_many_arguments)]
fn proposed_rate(
    y: &CouplingTensor,
    clean: &CouplingTensor,
    sets: &CandidateSets,
    table: &CandidateTable,
    m: usize,
    mode: SelectionMode,
    sigma2: f64,
    n_s: usize,
    tx: &Codebook,
    rx: &Codebook,
    r_s: &ComplexMatrix,
) -> Result<(f64, f64)> {
    let gamma = gamma_from_sigma2(sigma2, n_s);
    let (i_f, i_w) = table.best(mode, gamma, n_s, |i_f, i_w| sets.within_first(i_f, i_w, m))?;
    let est = estimate_effective_channel(y, sets, i_f, i_w, tx, rx)?;
    let bf = digital_beamforming(&est, sets, tx, rx, n_s)?;
    let audit = audit_power_constraints(&bf, r_s);
    let residual = audit.worst_tx().1.max(audit.worst_rx().1);
    let rate = rate_report_from_couplings(clean, &bf, r_s, sigma2)?;
    Ok((rate.mean_bits_per_s_hz, residual))
}

/// One channel draw, training per codebook, Algorithm 1 for every
/// criterion and candidate count, the OMP reference and the fully digital
/// baseline, at every SNR point.
pub fn run_trial(cfg: &SystemConfig, trial_index: usize) -> Result<TrialRates> {
    let chan = trial_channel(cfg, trial_index)?;
    let n_s = cfg.n_s;
    let r_s = equal_power(n_s);
    let sigma2: Vec<f64> = cfg.snr_grid_db.iter().map(|&s| sigma2_from_snr_db(s, n_s)).collect();
    let eigs = channel_eigenvalues(&chan);
    let dbf = sigma2
        .iter()
        .map(|&s2| fully_digital_from_eigenvalues(&eigs, gamma_from_sigma2(s2, n_s), n_s).mean_bits_per_s_hz)
        .collect();

    let max_m = cfg.max_m();
    let mut cells: Cells = Vec::new();
    let mut worst_audit: f64 = 0.0;

    for &kind in &cfg.codebooks {
        let tx = kind.build(cfg.n_t)?;
        let rx = kind.build(cfg.n_r)?;
        let clean = noise_free_couplings(&chan, &tx, &rx)?;
        let base = cells.len();
        for &mode in &cfg.criteria {
            for &m in &cfg.m_values {
                cells.push((
                    CellKey {
                        codebook: kind,
                        criterion: mode.name().to_string(),
                        m,
                    },
                    Vec::with_capacity(sigma2.len()),
                ));
            }
        }
        let slot = |mode_i: usize, m_i: usize| base + mode_i * cfg.m_values.len() + m_i;

        let prepare = |y: &CouplingTensor| {
            initial_beam_selection(y, max_m, cfg.n_rf)
                .and_then(|sets| CandidateTable::build(y, &sets, &tx, &rx).map(|t| (sets, t)))
        };
        let mut evaluate = |y: &CouplingTensor, prepared: &Result<(CandidateSets, CandidateTable)>, s2: f64, cells: &mut Cells| {
            for (mi, &mode) in cfg.criteria.iter().enumerate() {
                for (mj, &m) in cfg.m_values.iter().enumerate() {
                    let out = match prepared {
                        Ok((sets, table)) => {
                            proposed_rate(y, &clean, sets, table, m, mode, s2, n_s, &tx, &rx, &r_s)
                        }
                        Err(e) => Err(HbfError::Numerical(e.to_string())),
                    };
                    let entry = match out {
                        Ok((rate, residual)) => {
                            worst_audit = worst_audit.max(residual);
                            Ok(rate)
                        }
                        Err(e) => Err(e.to_string()),
                    };
                    cells[slot(mi, mj)].1.push(entry);
                }
            }
        };

        if cfg.noise_free_training {
            // Screening and estimates do not depend on σ² here; only the
            // eig score and the evaluated rate do.
            let prepared = prepare(&clean);
            for &s2 in &sigma2 {
                evaluate(&clean, &prepared, s2, &mut cells);
            }
        } else {
            let noise = unit_noise(clean.n_w(), clean.n_f(), clean.subcarriers(), training_seed(cfg.trial_seed(trial_index), kind));
            for &s2 in &sigma2 {
                let y = clean.with_scaled_noise(&noise, s2)?;
                let prepared = prepare(&y);
                evaluate(&y, &prepared, s2, &mut cells);
            }
        }

        if cfg.reference {
            let key = CellKey {
                codebook: kind,
                criterion: REFERENCE_LABEL.to_string(),
                m: cfg.n_rf,
            };
            let rates = match reference_beamformers(&chan, &tx, &rx, cfg.n_rf, n_s) {
                Ok(r) => sigma2
                    .iter()
                    .map(|&s2| {
                        rate_report_from_couplings(&clean, &r.beamformers, &r_s, s2)
                            .map(|x| x.mean_bits_per_s_hz)
                            .map_err(|e| e.to_string())
                    })
                    .collect(),
                Err(e) => vec![Err(e.to_string()); sigma2.len()],
            };
            cells.push((key, rates));
        }
    }

    Ok(TrialRates {
        trial_index,
        dbf,
        cells,
        worst_audit_residual: worst_audit,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub snr_db: f64,
    pub codebook: CodebookKind,
    pub criterion: String,
    pub m: usize,
    /// Trials that produced a rate.
    pub trials: usize,
    pub failed: usize,
    pub mean_rate: f64,
    /// Fully digital mean over the same trials.
    pub dbf_mean_rate: f64,
    /// `mean_rate / dbf_mean_rate`.
    pub normalized_rate: f64,
    /// Mean of the per-trial ratios, kept for comparison.
    pub mean_of_ratios: f64,
    pub ci95_halfwidth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// Sorted by `(codebook, criterion, m, snr_db)`.
    pub rows: Vec<SweepRow>,
    pub total_trials: usize,
    /// Trials whose channel draw itself failed.
    pub failed_trials: Vec<(usize, String)>,
    pub worst_audit_residual: f64,
}

impl SweepResult {
    /// Failed evaluations over all cells and SNR points, and the total.
    pub fn failure_counts(&self) -> (usize, usize) {
        self.rows
            .iter()
            .fold((0, 0), |(f, t), r| (f + r.failed, t + r.failed + r.trials))
    }

    /// More than 1% of trials failed in some row.
    pub fn failure_budget_exceeded(&self) -> bool {
        !self.failed_trials.is_empty() && self.failed_trials.len() * 100 > self.total_trials
            || self.rows.iter().any(|r| r.failed * 100 > r.failed + r.trials)
    }

    pub fn row(&self, codebook: CodebookKind, criterion: &str, m: usize, snr_db: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.codebook == codebook && r.criterion == criterion && r.m == m && r.snr_db == snr_db)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.snr_db,
                r.codebook.name(),
                r.criterion,
                r.m,
                r.trials,
                r.mean_rate,
                r.dbf_mean_rate,
                r.normalized_rate,
                r.ci95_halfwidth
            );
        }
        out
    }
}

/// Folds trial results in ascending trial order into sweep rows.
pub fn aggregate(cfg: &SystemConfig, trials: &[std::result::Result<TrialRates, (usize, String)>]) -> SweepResult {
    let mut failed_trials = Vec::new();
    let mut ok: Vec<&TrialRates> = Vec::new();
    for t in trials {
        match t {
            Ok(r) => ok.push(r),
            Err(e) => failed_trials.push(e.clone()),
        }
    }
    ok.sort_by_key(|t| t.trial_index);

    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    if let Some(first) = ok.first() {
        for t in &ok {
            worst = worst.max(t.worst_audit_residual);
        }
        for (ci, (key, _)) in first.cells.iter().enumerate() {
            for (si, &snr_db) in cfg.snr_grid_db.iter().enumerate() {
                let (mut n, mut failed) = (0usize, 0usize);
                let (mut sum, mut sum_sq, mut dbf_sum, mut ratio_sum) = (0.0, 0.0, 0.0, 0.0);
                for t in &ok {
                    match &t.cells[ci].1[si] {
                        Ok(rate) => {
                            let d = t.dbf[si];
                            n += 1;
                            sum += rate;
                            sum_sq += rate * rate;
                            dbf_sum += d;
                            if d > 0.0 {
                                ratio_sum += rate / d;
                            }
                        }
                        Err(_) => failed += 1,
                    }
                }
                let nf = n as f64;
                let mean = if n > 0 { sum / nf } else { f64::NAN };
                let dbf_mean = if n > 0 { dbf_sum / nf } else { f64::NAN };
                let var = if n > 1 { ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
                rows.push(SweepRow {
                    snr_db,
                    codebook: key.codebook,
                    criterion: key.criterion.clone(),
                    m: key.m,
                    trials: n,
                    failed,
                    mean_rate: mean,
                    dbf_mean_rate: dbf_mean,
                    normalized_rate: mean / dbf_mean,
                    mean_of_ratios: if n > 0 { ratio_sum / nf } else { f64::NAN },
                    ci95_halfwidth: 1.96 * (var / nf.max(1.0)).sqrt(),
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.codebook, &a.criterion, a.m)
            .cmp(&(b.codebook, &b.criterion, b.m))
            .then(a.snr_db.total_cmp(&b.snr_db))
    });
    SweepResult {
        rows,
        total_trials: trials.len(),
        failed_trials,
        worst_audit_residual: worst,
    }
}

/// Runs every trial on `cfg.workers` threads and aggregates in trial order.
pub fn run_sweep(cfg: &SystemConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let run = || -> Vec<std::result::Result<TrialRates, (usize, String)>> {
        (0..cfg.trials)
            .into_par_iter()
            .map(|i| run_trial(cfg, i).map_err(|e| (i, e.to_string())))
            .collect()
    };
    let trials = if cfg.workers == 1 {
        (0..cfg.trials)
            .map(|i| run_trial(cfg, i).map_err(|e| (i, e.to_string())))
            .collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| HbfError::Config(format!("thread pool: {e}")))?
            .install(run)
    };
    Ok(aggregate(cfg, &trials))
}

/// Writes the CSV through a temporary file in the target directory and
/// renames it into place.
pub fn emit_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HbfError::io(dir, e))?;
    tmp.write_all(result.to_csv().as_bytes())
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| HbfError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| HbfError::io(path, e.error))?;
    Ok(())
}
