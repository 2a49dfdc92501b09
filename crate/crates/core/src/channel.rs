//! Cluster-based frequency-selective mmWave MIMO channel.
//!
//! `H[k] = √ρ · Σ_c Σ_r α[c][r] · exp(−j2πk·l[c][r]/K) · a_A(φ_A[c][r]) · a_D(φ_D[c][r])^H`
//!
//! Cluster 0 is the line-of-sight cluster. Ray angles are the cluster mean
//! plus the angular spread times a fixed per-ray offset. Rays sharing a delay
//! are folded into one tap matrix, so `H[k]` is a phase-weighted sum of at
//! most `C·R` (usually `C`) precomputed taps.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::codebook::array_response;
use crate::error::{HbfError, Result};
use crate::matkernel::{ComplexMatrix, C64};

/// Symmetric 8-element ray offset basis (leading entries of the common
/// 20-ray offset table), in units of the RMS angular spread.
pub const DEFAULT_RAY_OFFSETS: [f64; 8] = [
    0.0447, -0.0447, 0.1413, -0.1413, 0.2492, -0.2492, 0.3715, -0.3715,
];

/// How ray phases are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseModel {
    /// One uniform phase per cluster, shared by its rays.
    Cluster,
    /// Independent uniform phase per ray.
    Ray,
}

impl PhaseModel {
    pub fn name(self) -> &'static str {
        match self {
            PhaseModel::Cluster => "cluster",
            PhaseModel::Ray => "ray",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cluster" => Some(PhaseModel::Cluster),
            "ray" => Some(PhaseModel::Ray),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub num_clusters: usize,
    pub rays_per_cluster: usize,
    /// Linear LoS-to-NLoS cluster power ratio.
    pub los_nlos_power_ratio: f64,
    /// RMS angular spread at departure, degrees.
    pub asd_deg: f64,
    /// RMS angular spread at arrival, degrees.
    pub asa_deg: f64,
    /// One offset per ray; length must equal `rays_per_cluster`.
    pub ray_offsets: Vec<f64>,
    /// Cluster delays are drawn uniformly from `0..=max_delay` samples.
    pub max_delay: usize,
    pub phase_model: PhaseModel,
    /// Average received power ρ.
    pub avg_power: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            num_clusters: 5,
            rays_per_cluster: 8,
            los_nlos_power_ratio: 100.0,
            asd_deg: 3.0,
            asa_deg: 15.0,
            ray_offsets: DEFAULT_RAY_OFFSETS.to_vec(),
            max_delay: 63,
            phase_model: PhaseModel::Cluster,
            avg_power: 1.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.rays_per_cluster == 0 {
            return Err(HbfError::Config(
                "channel needs at least one cluster and one ray per cluster".into(),
            ));
        }
        if self.ray_offsets.len() != self.rays_per_cluster {
            return Err(HbfError::Config(format!(
                "{} ray offsets given for {} rays per cluster",
                self.ray_offsets.len(),
                self.rays_per_cluster
            )));
        }
        if !(self.los_nlos_power_ratio > 0.0) || !(self.avg_power > 0.0) {
            return Err(HbfError::Config(
                "power ratio and average power must be positive".into(),
            ));
        }
        if !self.asd_deg.is_finite() || !self.asa_deg.is_finite() {
            return Err(HbfError::Config("angular spreads must be finite".into()));
        }
        Ok(())
    }

    /// Per-cluster powers: cluster 0 carries `ratio` times the power of each
    /// of the others, and the powers sum to one.
    pub fn cluster_powers(&self) -> Vec<f64> {
        let nlos = 1.0 / (self.los_nlos_power_ratio + (self.num_clusters - 1) as f64);
        (0..self.num_clusters)
            .map(|c| if c == 0 { self.los_nlos_power_ratio * nlos } else { nlos })
            .collect()
    }
}

/// Array and OFDM dimensions a channel is generated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkDims {
    pub n_t: usize,
    pub n_r: usize,
    pub n_rf: usize,
    pub subcarriers: usize,
}

/// Ray-level parameters, stored flat with ray `(c, r)` at `c·R + r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterParams {
    pub num_clusters: usize,
    pub rays_per_cluster: usize,
    pub gains: Vec<C64>,
    pub delays: Vec<usize>,
    pub aod_deg: Vec<f64>,
    pub aoa_deg: Vec<f64>,
    pub mean_aod_deg: Vec<f64>,
    pub mean_aoa_deg: Vec<f64>,
    pub asd_deg: f64,
    pub asa_deg: f64,
    pub ray_offsets: Vec<f64>,
}

impl ClusterParams {
    pub fn num_rays(&self) -> usize {
        self.num_clusters * self.rays_per_cluster
    }

    /// A single ray with the given gain, delay and angles.
    pub fn single_path(gain: C64, delay: usize, aod_deg: f64, aoa_deg: f64) -> Self {
        ClusterParams {
            num_clusters: 1,
            rays_per_cluster: 1,
            gains: vec![gain],
            delays: vec![delay],
            aod_deg: vec![aod_deg],
            aoa_deg: vec![aoa_deg],
            mean_aod_deg: vec![aod_deg],
            mean_aoa_deg: vec![aoa_deg],
            asd_deg: 0.0,
            asa_deg: 0.0,
            ray_offsets: vec![0.0],
        }
    }

    /// Discrete paths, one cluster per path with a single ray each.
    pub fn discrete_paths(paths: &[(C64, usize, f64, f64)]) -> Self {
        ClusterParams {
            num_clusters: paths.len(),
            rays_per_cluster: 1,
            gains: paths.iter().map(|p| p.0).collect(),
            delays: paths.iter().map(|p| p.1).collect(),
            aod_deg: paths.iter().map(|p| p.2).collect(),
            aoa_deg: paths.iter().map(|p| p.3).collect(),
            mean_aod_deg: paths.iter().map(|p| p.2).collect(),
            mean_aoa_deg: paths.iter().map(|p| p.3).collect(),
            asd_deg: 0.0,
            asa_deg: 0.0,
            ray_offsets: vec![0.0],
        }
    }

    pub fn total_power(&self) -> f64 {
        self.gains.iter().map(|g| g.norm_sqr()).sum()
    }

    pub fn cluster_power(&self, c: usize) -> f64 {
        let r = self.rays_per_cluster;
        self.gains[c * r..(c + 1) * r].iter().map(|g| g.norm_sqr()).sum()
    }

    fn validate(&self, subcarriers: usize) -> Result<()> {
        let n = self.num_rays();
        if n == 0 {
            return Err(HbfError::Config("channel has no rays".into()));
        }
        let lens = [
            self.gains.len(),
            self.delays.len(),
            self.aod_deg.len(),
            self.aoa_deg.len(),
        ];
        if lens.iter().any(|&l| l != n)
            || self.mean_aod_deg.len() != self.num_clusters
            || self.mean_aoa_deg.len() != self.num_clusters
        {
            return Err(HbfError::Config(format!(
                "cluster parameter lengths {lens:?} do not match {} clusters x {} rays",
                self.num_clusters, self.rays_per_cluster
            )));
        }
        if let Some(&d) = self.delays.iter().find(|&&d| d >= subcarriers) {
            return Err(HbfError::Config(format!(
                "delay {d} does not fit in {subcarriers} subcarriers"
            )));
        }
        if self
            .gains
            .iter()
            .any(|g| !g.re.is_finite() || !g.im.is_finite())
            || self
                .aod_deg
                .iter()
                .chain(&self.aoa_deg)
                .any(|a| !a.is_finite())
        {
            return Err(HbfError::Config("non-finite channel parameter".into()));
        }
        Ok(())
    }
}

/// One channel draw with its per-subcarrier matrices.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    params: ClusterParams,
    avg_power: f64,
    n_t: usize,
    n_r: usize,
    /// `(delay, √ρ·Σ α·a_A·a_D^H over rays with that delay)`, ascending delay.
    taps: Vec<(usize, ComplexMatrix)>,
    per_subcarrier: Vec<ComplexMatrix>,
}

impl ChannelRealization {
    pub fn from_params(
        params: ClusterParams,
        n_t: usize,
        n_r: usize,
        subcarriers: usize,
        avg_power: f64,
    ) -> Result<Self> {
        if n_t == 0 || n_r == 0 || subcarriers == 0 {
            return Err(HbfError::Config(format!(
                "invalid link dimensions n_t={n_t} n_r={n_r} K={subcarriers}"
            )));
        }
        if !(avg_power > 0.0) {
            return Err(HbfError::Config("average power must be positive".into()));
        }
        params.validate(subcarriers)?;

        let amp = avg_power.sqrt();
        let mut taps: BTreeMap<usize, DMatrix<C64>> = BTreeMap::new();
        for i in 0..params.num_rays() {
            let a_d = array_response(params.aod_deg[i], n_t);
            let a_a = array_response(params.aoa_deg[i], n_r);
            let outer = &a_a * a_d.adjoint() * (params.gains[i] * amp);
            taps.entry(params.delays[i])
                .and_modify(|t| *t += &outer)
                .or_insert(outer);
        }
        let taps: Vec<(usize, ComplexMatrix)> = taps
            .into_iter()
            .map(|(d, m)| (d, ComplexMatrix::from_dmatrix_unchecked(m)))
            .collect();

        let per_subcarrier = (0..subcarriers)
            .map(|k| {
                let mut h = DMatrix::<C64>::zeros(n_r, n_t);
                for (delay, tap) in &taps {
                    h += tap.as_dmatrix() * subcarrier_phase(k, *delay, subcarriers);
                }
                ComplexMatrix::from_dmatrix_unchecked(h)
            })
            .collect();

        Ok(ChannelRealization {
            params,
            avg_power,
            n_t,
            n_r,
            taps,
            per_subcarrier,
        })
    }

    pub fn params(&self) -> &ClusterParams {
        &self.params
    }

    pub fn avg_power(&self) -> f64 {
        self.avg_power
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn subcarriers(&self) -> usize {
        self.per_subcarrier.len()
    }

    pub fn taps(&self) -> &[(usize, ComplexMatrix)] {
        &self.taps
    }

    pub fn per_subcarrier(&self) -> &[ComplexMatrix] {
        &self.per_subcarrier
    }

    /// The stored `H[k]`.
    pub fn channel_matrix(&self, k: usize) -> Result<&ComplexMatrix> {
        self.per_subcarrier
            .get(k)
            .ok_or(HbfError::IndexOutOfRange {
                what: "subcarrier",
                index: k,
                len: self.per_subcarrier.len(),
            })
    }

    /// Cluster parameters as CSV, with the link dimensions and spread
    /// settings in leading `#` lines.
    pub fn params_to_csv(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# n_t={},n_r={},subcarriers={},avg_power={},num_clusters={},rays_per_cluster={},asd_deg={},asa_deg={}",
            self.n_t,
            self.n_r,
            self.subcarriers(),
            self.avg_power,
            p.num_clusters,
            p.rays_per_cluster,
            p.asd_deg,
            p.asa_deg
        );
        let offsets: Vec<String> = p.ray_offsets.iter().map(|o| o.to_string()).collect();
        let _ = writeln!(out, "# ray_offsets={}", offsets.join(";"));
        out.push_str("cluster,ray,gain_re,gain_im,delay,aod_deg,aoa_deg,mean_aod_deg,mean_aoa_deg\n");
        for c in 0..p.num_clusters {
            for r in 0..p.rays_per_cluster {
                let i = c * p.rays_per_cluster + r;
                let _ = writeln!(
                    out,
                    "{c},{r},{},{},{},{},{},{},{}",
                    p.gains[i].re,
                    p.gains[i].im,
                    p.delays[i],
                    p.aod_deg[i],
                    p.aoa_deg[i],
                    p.mean_aod_deg[c],
                    p.mean_aoa_deg[c]
                );
            }
        }
        out
    }

    /// Rebuilds a realization from [`Self::params_to_csv`] output.
    pub fn from_params_csv(text: &str, source: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| HbfError::Parse {
            path: source.to_path_buf(),
            line,
            msg,
        };
        let mut meta: BTreeMap<String, String> = BTreeMap::new();
        let mut rows: Vec<(usize, Vec<&str>)> = Vec::new();
        let mut saw_header = false;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split(',') {
                    if let Some((k, v)) = kv.split_once('=') {
                        meta.insert(k.trim().to_string(), v.trim().to_string());
                    }
                }
                continue;
            }
            if !saw_header {
                if !line.starts_with("cluster,ray,") {
                    return Err(perr(lineno, "missing column header".into()));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(perr(lineno, format!("expected 9 fields, got {}", fields.len())));
            }
            rows.push((lineno, fields));
        }

        let get = |key: &str| -> Result<&String> {
            meta.get(key)
                .ok_or_else(|| perr(1, format!("missing metadata key {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|e| perr(1, format!("{key}: {e}")))
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|e| perr(1, format!("{key}: {e}")))
        };
        let n_t = parse_usize("n_t")?;
        let n_r = parse_usize("n_r")?;
        let subcarriers = parse_usize("subcarriers")?;
        let avg_power = parse_f64("avg_power")?;
        let num_clusters = parse_usize("num_clusters")?;
        let rays_per_cluster = parse_usize("rays_per_cluster")?;
        let asd_deg = parse_f64("asd_deg")?;
        let asa_deg = parse_f64("asa_deg")?;
        let ray_offsets = get("ray_offsets")?
            .split(';')
            .map(|s| s.parse::<f64>().map_err(|e| perr(2, format!("ray_offsets: {e}"))))
            .collect::<Result<Vec<_>>>()?;

        let n = num_clusters * rays_per_cluster;
        if rows.len() != n {
            return Err(perr(
                0,
                format!("expected {n} ray rows, found {}", rows.len()),
            ));
        }
        let mut params = ClusterParams {
            num_clusters,
            rays_per_cluster,
            gains: vec![C64::new(0.0, 0.0); n],
            delays: vec![0; n],
            aod_deg: vec![0.0; n],
            aoa_deg: vec![0.0; n],
            mean_aod_deg: vec![0.0; num_clusters],
            mean_aoa_deg: vec![0.0; num_clusters],
            asd_deg,
            asa_deg,
            ray_offsets,
        };
        for (lineno, f) in rows {
            let num = |i: usize| -> Result<f64> {
                f[i].parse::<f64>()
                    .map_err(|e| perr(lineno, format!("field {i}: {e}")))
            };
            let int = |i: usize| -> Result<usize> {
                f[i].parse::<usize>()
                    .map_err(|e| perr(lineno, format!("field {i}: {e}")))
            };
            let (c, r) = (int(0)?, int(1)?);
            if c >= num_clusters || r >= rays_per_cluster {
                return Err(perr(lineno, format!("ray ({c}, {r}) out of range")));
            }
            let i = c * rays_per_cluster + r;
            params.gains[i] = C64::new(num(2)?, num(3)?);
            params.delays[i] = int(4)?;
            params.aod_deg[i] = num(5)?;
            params.aoa_deg[i] = num(6)?;
            params.mean_aod_deg[c] = num(7)?;
            params.mean_aoa_deg[c] = num(8)?;
        }
        Self::from_params(params, n_t, n_r, subcarriers, avg_power)
    }

    pub fn write_params_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.params_to_csv()).map_err(|e| HbfError::io(path, e))
    }

    pub fn read_params_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HbfError::io(path, e))?;
        Self::from_params_csv(&text, path)
    }

    /// Per-subcarrier dump, `k,row,col,re,im`.
    pub fn subcarriers_to_csv(&self) -> String {
        let mut out = String::from("k,row,col,re,im\n");
        for (k, h) in self.per_subcarrier.iter().enumerate() {
            for r in 0..h.rows() {
                for c in 0..h.cols() {
                    let z = h[(r, c)];
                    let _ = writeln!(out, "{k},{r},{c},{},{}", z.re, z.im);
                }
            }
        }
        out
    }
}

/// `exp(−j2πk·l/K)`.
pub fn subcarrier_phase(k: usize, delay: usize, subcarriers: usize) -> C64 {
    // Reduce k·l modulo K first so large products keep full precision.
    let m = (k as u128 * delay as u128 % subcarriers as u128) as f64;
    C64::from_polar(1.0, -TAU * m / subcarriers as f64)
}

/// Draws cluster means, delays and phases and builds the realization.
///
/// Draw order per cluster: mean AoD, mean AoA, delay, then one phase
/// (cluster model) or `R` phases (ray model).
pub fn sample_channel<R: Rng + ?Sized>(
    dims: LinkDims,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<ChannelRealization> {
    cfg.validate()?;
    let paths = cfg.num_clusters * cfg.rays_per_cluster;
    if paths < dims.n_rf {
        return Err(HbfError::Config(format!(
            "{} clusters x {} rays = {paths} paths, fewer than {} RF chains",
            cfg.num_clusters, cfg.rays_per_cluster, dims.n_rf
        )));
    }
    if dims.subcarriers == 0 {
        return Err(HbfError::Config("at least one subcarrier required".into()));
    }
    let max_delay = cfg.max_delay.min(dims.subcarriers - 1);
    let powers = cfg.cluster_powers();
    let r_count = cfg.rays_per_cluster;

    let mut params = ClusterParams {
        num_clusters: cfg.num_clusters,
        rays_per_cluster: r_count,
        gains: Vec::with_capacity(paths),
        delays: Vec::with_capacity(paths),
        aod_deg: Vec::with_capacity(paths),
        aoa_deg: Vec::with_capacity(paths),
        mean_aod_deg: Vec::with_capacity(cfg.num_clusters),
        mean_aoa_deg: Vec::with_capacity(cfg.num_clusters),
        asd_deg: cfg.asd_deg,
        asa_deg: cfg.asa_deg,
        ray_offsets: cfg.ray_offsets.clone(),
    };
    for &power in &powers {
        let mean_aod: f64 = rng.gen_range(-90.0..90.0);
        let mean_aoa: f64 = rng.gen_range(-90.0..90.0);
        let delay = rng.gen_range(0..=max_delay);
        let cluster_phase: f64 = match cfg.phase_model {
            PhaseModel::Cluster => rng.gen_range(0.0..TAU),
            PhaseModel::Ray => 0.0,
        };
        let amp = (power / r_count as f64).sqrt();
        params.mean_aod_deg.push(mean_aod);
        params.mean_aoa_deg.push(mean_aoa);
        for offset in &cfg.ray_offsets {
            let phase = match cfg.phase_model {
                PhaseModel::Cluster => cluster_phase,
                PhaseModel::Ray => rng.gen_range(0.0..TAU),
            };
            params.gains.push(C64::from_polar(amp, phase));
            params.delays.push(delay);
            params.aod_deg.push(mean_aod + cfg.asd_deg * offset);
            params.aoa_deg.push(mean_aoa + cfg.asa_deg * offset);
        }
    }
    ChannelRealization::from_params(params, dims.n_t, dims.n_r, dims.subcarriers, cfg.avg_power)
}
