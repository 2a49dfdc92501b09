//! Throughput, power-constraint audits, the low-SNR approximation error,
//! and statistics of the noise in an estimated effective channel.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::beamcore::BeamformerSet;
use crate::channel::ChannelRealization;
use crate::error::{HbfError, Result};
use crate::matkernel::{
    frobenius_sq, gram_eigenvalues, inv_hermitian, inv_sqrt_hermitian, kron,
    log2_det_hermitian_pd, ComplexMatrix, C64,
};
use crate::training::CouplingTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub per_subcarrier_bits: Vec<f64>,
    pub mean_bits_per_s_hz: f64,
    pub normalized_to_dbf: Option<f64>,
}

impl RateReport {
    pub fn from_per_subcarrier(per_subcarrier_bits: Vec<f64>) -> Self {
        let mean = if per_subcarrier_bits.is_empty() {
            0.0
        } else {
            per_subcarrier_bits.iter().sum::<f64>() / per_subcarrier_bits.len() as f64
        };
        RateReport {
            per_subcarrier_bits,
            mean_bits_per_s_hz: mean,
            normalized_to_dbf: None,
        }
    }

    pub fn normalized(mut self, dbf: &RateReport) -> Self {
        self.normalized_to_dbf = (dbf.mean_bits_per_s_hz > 0.0)
            .then(|| self.mean_bits_per_s_hz / dbf.mean_bits_per_s_hz);
        self
    }
}

/// Equal power over `n_s` streams.
pub fn equal_power(n_s: usize) -> ComplexMatrix {
    ComplexMatrix::identity(n_s).scale(1.0 / n_s as f64)
}

/// `γ = 1/(N_S·σ²)`.
pub fn gamma_from_sigma2(sigma2: f64, n_s: usize) -> f64 {
    1.0 / (n_s as f64 * sigma2)
}

/// `σ² = 1/(N_S·SNR)` with `SNR` given in dB.
pub fn sigma2_from_snr_db(snr_db: f64, n_s: usize) -> f64 {
    1.0 / (n_s as f64 * 10f64.powf(snr_db / 10.0))
}

/// Mutual information of one subcarrier given the analog-domain channel
/// `g = W_P^H H F_P` and the receive Gram `W_P^H W_P`.
///
/// `I = log2 det(R_n + Q) − log2 det(R_n)` with
/// `Q = W_B^H g F_B R_s F_B^H g^H W_B` and `R_n = σ² W_B^H W_P^H W_P W_B`.
pub fn mutual_information_from_coupling(
    g: &DMatrix<C64>,
    rx_gram: &DMatrix<C64>,
    f_b: &DMatrix<C64>,
    w_b: &DMatrix<C64>,
    r_s: &DMatrix<C64>,
    sigma2: f64,
    k: usize,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(HbfError::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    if g.nrows() != w_b.nrows()
        || g.ncols() != f_b.nrows()
        || rx_gram.shape() != (w_b.nrows(), w_b.nrows())
        || r_s.shape() != (f_b.ncols(), f_b.ncols())
    {
        return Err(HbfError::DimensionMismatch {
            op: "mutual_information",
            detail: format!(
                "g {:?}, W_P^H W_P {:?}, F_B {:?}, W_B {:?}, R_s {:?}",
                g.shape(),
                rx_gram.shape(),
                f_b.shape(),
                w_b.shape(),
                r_s.shape()
            ),
        });
    }
    let a = w_b.adjoint() * g * f_b;
    let q = &a * r_s * a.adjoint();
    let rn = w_b.adjoint() * rx_gram * w_b * C64::new(sigma2, 0.0);
    let base = log2_det_hermitian_pd(&rn).ok_or(HbfError::SingularNoiseCovariance { subcarrier: k })?;
    let total = log2_det_hermitian_pd(&(rn + q)).ok_or_else(|| {
        HbfError::Numerical(format!("signal-plus-noise covariance not positive definite at subcarrier {k}"))
    })?;
    Ok((total - base).max(0.0))
}

/// Mutual information at subcarrier `k` for the channel matrix `h_k`.
pub fn mutual_information(
    h_k: &ComplexMatrix,
    bf: &BeamformerSet,
    k: usize,
    r_s: &ComplexMatrix,
    sigma2: f64,
) -> Result<f64> {
    let f_b = bf.tx_digital.get(k).ok_or(HbfError::IndexOutOfRange {
        what: "subcarrier",
        index: k,
        len: bf.tx_digital.len(),
    })?;
    let w_b = &bf.rx_digital[k];
    let wp_h = bf.rx_analog.adjoint();
    let g = wp_h.matmul(h_k)?.matmul(&bf.tx_analog)?;
    let rx_gram = &wp_h * &bf.rx_analog;
    mutual_information_from_coupling(
        g.as_dmatrix(),
        rx_gram.as_dmatrix(),
        f_b.as_dmatrix(),
        w_b.as_dmatrix(),
        r_s.as_dmatrix(),
        sigma2,
        k,
    )
}

/// Throughput of a beamformer set over all subcarriers of a channel.
pub fn rate_report(
    chan: &ChannelRealization,
    bf: &BeamformerSet,
    r_s: &ComplexMatrix,
    sigma2: f64,
) -> Result<RateReport> {
    if bf.subcarriers() != chan.subcarriers() {
        return Err(HbfError::DimensionMismatch {
            op: "rate_report",
            detail: format!(
                "{} digital stages for {} subcarriers",
                bf.subcarriers(),
                chan.subcarriers()
            ),
        });
    }
    let bits = chan
        .per_subcarrier()
        .iter()
        .enumerate()
        .map(|(k, h)| mutual_information(h, bf, k, r_s, sigma2))
        .collect::<Result<Vec<_>>>()?;
    Ok(RateReport::from_per_subcarrier(bits))
}

/// Same as [`rate_report`] but reads `W_P^H H[k] F_P` from a noise-free
/// coupling tensor built with the codebooks `bf` indexes into.
pub fn rate_report_from_couplings(
    clean: &CouplingTensor,
    bf: &BeamformerSet,
    r_s: &ComplexMatrix,
    sigma2: f64,
) -> Result<RateReport> {
    if !clean.is_noise_free() {
        return Err(HbfError::InvalidArgument(
            "rate evaluation needs noise-free couplings".into(),
        ));
    }
    if bf.subcarriers() != clean.subcarriers() {
        return Err(HbfError::DimensionMismatch {
            op: "rate_report_from_couplings",
            detail: format!(
                "{} digital stages for {} subcarriers",
                bf.subcarriers(),
                clean.subcarriers()
            ),
        });
    }
    let rx_gram = (&bf.rx_analog.adjoint() * &bf.rx_analog).into_dmatrix();
    let bits = (0..clean.subcarriers())
        .map(|k| {
            let g = clean.gather(&bf.rx_indices, &bf.tx_indices, k);
            mutual_information_from_coupling(
                &g,
                &rx_gram,
                bf.tx_digital[k].as_dmatrix(),
                bf.rx_digital[k].as_dmatrix(),
                r_s.as_dmatrix(),
                sigma2,
                k,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RateReport::from_per_subcarrier(bits))
}

/// Eigenvalues of `H[k] H[k]^H` for every subcarrier, descending.
pub fn channel_eigenvalues(chan: &ChannelRealization) -> Vec<Vec<f64>> {
    chan.per_subcarrier()
        .iter()
        .map(|h| gram_eigenvalues(h.as_dmatrix()))
        .collect()
}

/// Fully digital throughput from per-subcarrier eigenvalues of `H H^H`.
pub fn fully_digital_from_eigenvalues(eigs: &[Vec<f64>], gamma: f64, n_s: usize) -> RateReport {
    let bits = eigs
        .iter()
        .map(|ev| ev.iter().take(n_s).map(|&l| (1.0 + gamma * l).log2()).sum())
        .collect();
    RateReport::from_per_subcarrier(bits)
}

/// `(1/K) Σ_k Σ_{n_s ≤ N_S} log2(1 + γ λ_{n_s}[k])`.
pub fn fully_digital_rate(chan: &ChannelRealization, gamma: f64, n_s: usize) -> Result<RateReport> {
    if !(gamma > 0.0) {
        return Err(HbfError::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(fully_digital_from_eigenvalues(&channel_eigenvalues(chan), gamma, n_s))
}

/// Per-subcarrier residuals of the transmit power and receive whitening
/// constraints.
#[derive(Clone, Debug)]
pub struct PowerAudit {
    /// `|tr(F_P F_B R_s F_B^H F_P^H) − tr(R_s)|`.
    pub tx_residuals: Vec<f64>,
    /// Largest entry of `|W_B^H W_P^H W_P W_B − I|`.
    pub rx_residuals: Vec<f64>,
}

impl PowerAudit {
    pub fn worst_tx(&self) -> (usize, f64) {
        worst(&self.tx_residuals)
    }

    pub fn worst_rx(&self) -> (usize, f64) {
        worst(&self.rx_residuals)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst_tx().1 <= tol && self.worst_rx().1 <= tol
    }
}

fn worst(v: &[f64]) -> (usize, f64) {
    v.iter()
        .cloned()
        .enumerate()
        .fold((0, 0.0), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc })
}

pub fn audit_power_constraints(bf: &BeamformerSet, r_s: &ComplexMatrix) -> PowerAudit {
    let target = r_s.trace().re;
    let mut tx_residuals = Vec::with_capacity(bf.subcarriers());
    let mut rx_residuals = Vec::with_capacity(bf.subcarriers());
    for (f_b, w_b) in bf.tx_digital.iter().zip(&bf.rx_digital) {
        let fpfb = &bf.tx_analog * f_b;
        let p = (&(&fpfb * r_s) * &fpfb.adjoint()).trace();
        tx_residuals.push((p - C64::new(target, 0.0)).norm());
        let wpwb = &bf.rx_analog * w_b;
        let g = &wpwb.adjoint() * &wpwb;
        rx_residuals.push(g.max_abs_diff(&ComplexMatrix::identity(g.rows())));
    }
    PowerAudit {
        tx_residuals,
        rx_residuals,
    }
}

/// Per-realization sums feeding the approximation error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApproximationTerms {
    /// `Σ_k Σ_{n_s} log2(1 + γσ²)`.
    pub exact: f64,
    /// `Σ_k γ‖H_E[k]‖_F²`.
    pub linear: f64,
    /// `Σ_k ‖H_E[k]‖_F²`.
    pub frobenius: f64,
}

pub fn approximation_terms(effective: &[ComplexMatrix], gamma: f64, n_s: usize) -> ApproximationTerms {
    let mut t = ApproximationTerms {
        exact: 0.0,
        linear: 0.0,
        frobenius: 0.0,
    };
    for h in effective {
        let ev = gram_eigenvalues(h.as_dmatrix());
        t.exact += ev.iter().take(n_s).map(|&s| (1.0 + gamma * s).log2()).sum::<f64>();
        let fro = frobenius_sq(h);
        t.frobenius += fro;
        t.linear += gamma * fro;
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApproximationError {
    /// `|E[exact] − E[linear]| / K`.
    pub epsilon: f64,
    /// `(γ/K)(1/ln2 − 1)·E[frobenius]`.
    pub closed_form: f64,
}

/// Ensemble approximation error over realizations with `subcarriers`
/// subcarriers each.
pub fn approximation_error(terms: &[ApproximationTerms], gamma: f64, subcarriers: usize) -> Result<ApproximationError> {
    if terms.is_empty() || subcarriers == 0 {
        return Err(HbfError::InvalidArgument(
            "approximation error needs at least one realization and subcarrier".into(),
        ));
    }
    let n = terms.len() as f64;
    let kk = subcarriers as f64;
    let mean = |f: fn(&ApproximationTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
    let exact = mean(|t| t.exact);
    let linear = mean(|t| t.linear);
    let fro = mean(|t| t.frobenius);
    Ok(ApproximationError {
        epsilon: (exact - linear).abs() / kk,
        closed_form: gamma / kk * (1.0 / std::f64::consts::LN_2 - 1.0) * fro,
    })
}

/// `Φ = (F̄^T F̄^*)^{-1} ⊗ (W̄^H W̄)^{-1}`, where `tx_gram = F̄^H F̄` and
/// `rx_gram = W̄^H W̄`. `Φ` is both the whitened noise covariance up to σ²
/// and the quadratic form with `U = vec(Z)^H Φ vec(Z)`.
pub fn noise_kernel(tx_gram: &ComplexMatrix, rx_gram: &ComplexMatrix) -> Result<ComplexMatrix> {
    let tx_conj = ComplexMatrix::from_dmatrix(tx_gram.as_dmatrix().map(|z| z.conj()))?;
    let a = inv_hermitian(&tx_conj).map_err(|e| e.with_gram_context("transmit Gram"))?;
    let b = inv_hermitian(rx_gram).map_err(|e| e.with_gram_context("receive Gram"))?;
    Ok(kron(&a, &b))
}

/// Covariance of `vec(Z_E)`: `σ²·Φ`.
pub fn ze_covariance(tx_gram: &ComplexMatrix, rx_gram: &ComplexMatrix, sigma2: f64) -> Result<ComplexMatrix> {
    Ok(noise_kernel(tx_gram, rx_gram)?.scale(sigma2))
}

fn cscg_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma2: f64) -> DMatrix<C64> {
    let s = (sigma2 / 2.0).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re * s, im * s)
    })
}

/// Independent draws of `vec(Z_E) = vec((W̄^H W̄)^{-1/2} Z (F̄^H F̄)^{-1/2})`
/// with `Z` i.i.d. `CN(0, σ²)`; column-major vectorization.
pub fn sample_ze(
    tx_gram: &ComplexMatrix,
    rx_gram: &ComplexMatrix,
    sigma2: f64,
    num_samples: usize,
    seed: u64,
) -> Result<Vec<DVector<C64>>> {
    let af = inv_sqrt_hermitian(tx_gram).map_err(|e| e.with_gram_context("transmit Gram"))?;
    let aw = inv_sqrt_hermitian(rx_gram).map_err(|e| e.with_gram_context("receive Gram"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rx_gram.rows(), tx_gram.rows());
    Ok((0..num_samples)
        .map(|_| {
            let z = cscg_matrix(&mut rng, r, c, sigma2);
            let ze = aw.as_dmatrix() * z * af.as_dmatrix();
            DVector::from_column_slice(ze.as_slice())
        })
        .collect())
}

/// Sample covariance `(1/n) Σ v v^H` of zero-mean draws.
pub fn empirical_covariance(draws: &[DVector<C64>]) -> Result<ComplexMatrix> {
    let first = draws
        .first()
        .ok_or_else(|| HbfError::InvalidArgument("no draws".into()))?;
    let d = first.len();
    let mut herm = DMatrix::<C64>::zeros(d, d);
    for v in draws {
        herm += v * v.adjoint();
    }
    ComplexMatrix::from_dmatrix(herm / C64::new(draws.len() as f64, 0.0))
}

/// Moments of `U = ‖Z_E‖_F²`.
#[derive(Clone, Debug)]
pub struct NoiseStats {
    /// Covariance of `vec(Z_E)`.
    pub covariance: ComplexMatrix,
    /// `σ²·tr((F̄^T F̄^*)^{-1})·tr((W̄^H W̄)^{-1})`.
    pub expected_u: f64,
    /// `tr(Ψ R_zV) − E[U]²` with `R_zV` estimated from samples.
    pub var_u: f64,
    /// Sample mean of `U` over the same draws.
    pub empirical_mean_u: f64,
    /// Sample variance of `U` over the same draws.
    pub empirical_var_u: f64,
    /// `N_RF²`; the Gamma law applies only for orthogonal combos.
    pub gamma_shape: f64,
    /// `σ²`.
    pub gamma_scale: f64,
}

/// `E[U]` in closed form and `Var(U)` from a Monte Carlo estimate of
/// `R_zV = E[(z⊗z)(z⊗z)^H]`, `z = vec(Z)`.
pub fn u_statistics(
    tx_gram: &ComplexMatrix,
    rx_gram: &ComplexMatrix,
    sigma2: f64,
    num_samples: usize,
    seed: u64,
) -> Result<NoiseStats> {
    if num_samples < 2 {
        return Err(HbfError::InvalidArgument("need at least two samples".into()));
    }
    if !(sigma2 > 0.0) {
        return Err(HbfError::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    let phi = noise_kernel(tx_gram, rx_gram)?;
    let tx_inv = inv_hermitian(tx_gram)?;
    let rx_inv = inv_hermitian(rx_gram)?;
    let expected_u = sigma2 * tx_inv.trace().re * rx_inv.trace().re;

    // R_zV from raw i.i.d. draws of Z, and U from the same draws whitened.
    let (r, c) = (rx_gram.rows(), tx_gram.rows());
    let d = r * c;
    let mut rzv = DMatrix::<C64>::zeros(d * d, d * d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u_samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let z = cscg_matrix(&mut rng, r, c, sigma2);
        let zv = DVector::from_column_slice(z.as_slice());
        let zz = zv.kronecker(&zv);
        rzv += &zz * zz.adjoint();
        u_samples.push((zv.adjoint() * phi.as_dmatrix() * &zv)[(0, 0)].re);
    }
    rzv /= C64::new(num_samples as f64, 0.0);
    let psi = kron(&phi, &phi);
    let var_u = (psi.as_dmatrix() * rzv).trace().re - expected_u * expected_u;

    let n = num_samples as f64;
    let mean = u_samples.iter().sum::<f64>() / n;
    let var = u_samples.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(NoiseStats {
        covariance: phi.scale(sigma2),
        expected_u,
        var_u,
        empirical_mean_u: mean,
        empirical_var_u: var,
        gamma_shape: d as f64,
        gamma_scale: sigma2,
    })
}

/// `Var(U) = σ⁴·tr(Φ²)`, the Gaussian fourth-moment value of
/// `tr(Ψ R_zV) − E[U]²`.
pub fn var_u_gaussian(tx_gram: &ComplexMatrix, rx_gram: &ComplexMatrix, sigma2: f64) -> Result<f64> {
    let phi = noise_kernel(tx_gram, rx_gram)?;
    Ok(sigma2 * sigma2 * (&phi * &phi).trace().re)
}

/// `U = ‖Z_E‖_F²` for each draw of `vec(Z_E)`.
pub fn u_samples(draws: &[DVector<C64>]) -> Vec<f64> {
    draws.iter().map(|v| v.norm_squared()).collect()
}

/// Sample mean and variance of `V = 2·Re tr(H_E'^H Z_E)` over draws of
/// `vec(Z_E)`.
pub fn v_statistics(h_e: &ComplexMatrix, draws: &[DVector<C64>]) -> Result<(f64, f64)> {
    let h = DVector::from_column_slice(h_e.as_dmatrix().as_slice());
    if draws.iter().any(|d| d.len() != h.len()) {
        return Err(HbfError::DimensionMismatch {
            op: "v_statistics",
            detail: format!("effective channel has {} entries", h.len()),
        });
    }
    if draws.len() < 2 {
        return Err(HbfError::InvalidArgument("need at least two draws".into()));
    }
    let v: Vec<f64> = draws.iter().map(|z| 2.0 * h.dotc(z).re).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var))
}

/// CDF of the Gamma law with integer or real `shape` and `scale`.
pub fn gamma_cdf(x: f64, shape: f64, scale: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / scale)
        .map_err(|e| HbfError::InvalidArgument(format!("Gamma({shape}, {scale}): {e}")))?;
    Ok(g.cdf(x))
}

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n − F|`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// A row of the statistics report.
#[derive(Clone, Debug, PartialEq)]
pub struct StatRow {
    pub statistic: String,
    pub closed_form: f64,
    pub empirical: f64,
}

impl StatRow {
    pub fn new(statistic: impl Into<String>, closed_form: f64, empirical: f64) -> Self {
        StatRow {
            statistic: statistic.into(),
            closed_form,
            empirical,
        }
    }

    pub fn rel_error(&self) -> f64 {
        if self.closed_form == 0.0 {
            self.empirical.abs()
        } else {
            ((self.empirical - self.closed_form) / self.closed_form).abs()
        }
    }
}

/// `statistic,closed_form,empirical,rel_error`.
pub fn stats_csv(rows: &[StatRow]) -> String {
    let mut out = String::from("statistic,closed_form,empirical,rel_error\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.statistic, r.closed_form, r.empirical, r.rel_error());
    }
    out
}

pub fn write_stats_csv(rows: &[StatRow], path: &Path) -> Result<()> {
    std::fs::write(path, stats_csv(rows)).map_err(|e| HbfError::io(path, e))
}

/// The standard statistics report for one Gram pair.
pub fn noise_stats_rows(stats: &NoiseStats, tx_gram: &ComplexMatrix, rx_gram: &ComplexMatrix) -> Result<Vec<StatRow>> {
    let analytic = var_u_gaussian(tx_gram, rx_gram, stats.gamma_scale)?;
    Ok(vec![
        StatRow::new("mean_u", stats.expected_u, stats.empirical_mean_u),
        StatRow::new("var_u_fourth_moment", analytic, stats.var_u),
        StatRow::new("var_u_sample", analytic, stats.empirical_var_u),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamcore::{digital_beamforming, initial_beam_selection, select_beams, SelectionMode};
    use crate::channel::{sample_channel, ChannelConfig, ClusterParams, LinkDims};
    use crate::codebook::Codebook;
    use crate::training::noise_free_couplings;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn gram(cc: C64) -> ComplexMatrix {
        ComplexMatrix::new(2, 2, vec![c(1.0, 0.0), cc, cc.conj(), c(1.0, 0.0)]).unwrap()
    }

    fn identity_bf(n: usize, n_s: usize, k: usize) -> BeamformerSet {
        let eye = ComplexMatrix::identity(n);
        let idx: Vec<usize> = (0..n).collect();
        BeamformerSet {
            tx_indices: idx.clone(),
            rx_indices: idx,
            tx_analog: eye.clone(),
            rx_analog: eye.clone(),
            tx_digital: vec![eye.leading_columns(n_s).unwrap(); k],
            rx_digital: vec![eye.leading_columns(n_s).unwrap(); k],
        }
    }

    #[test]
    fn identity_channel_two_streams() {
        let bf = identity_bf(2, 2, 1);
        let i = mutual_information(&ComplexMatrix::identity(2), &bf, 0, &equal_power(2), 1.0).unwrap();
        assert!((i - 2.0 * 1.5f64.log2()).abs() < 1e-12);
        assert!((i - 1.1699).abs() < 1e-4);
        let zero = mutual_information(&ComplexMatrix::zeros(2, 2), &bf, 0, &equal_power(2), 1.0).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn singular_combiner_names_subcarrier() {
        let mut bf = identity_bf(2, 2, 3);
        bf.rx_digital[2] = ComplexMatrix::zeros(2, 2);
        let err = mutual_information(&ComplexMatrix::identity(2), &bf, 2, &equal_power(2), 1.0).unwrap_err();
        assert!(matches!(err, HbfError::SingularNoiseCovariance { subcarrier: 2 }));
    }

    #[test]
    fn single_path_fully_digital() {
        let p = ClusterParams::single_path(c(1.0, 0.0), 3, 10.0, -20.0);
        let ch = ChannelRealization::from_params(p, 8, 8, 4, 1.0).unwrap();
        let r = fully_digital_rate(&ch, 1.0, 2).unwrap();
        assert!((r.mean_bits_per_s_hz - 1.0).abs() < 1e-12);
        assert!(fully_digital_rate(&ch, 0.0, 2).is_err());
    }

    fn random_setup(seed: u64) -> (ChannelRealization, Codebook, Codebook) {
        use rand::SeedableRng;
        let dims = LinkDims {
            n_t: 8,
            n_r: 8,
            n_rf: 2,
            subcarriers: 8,
        };
        let ch = sample_channel(dims, &ChannelConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (ch, Codebook::weakly_coherent(9, 8).unwrap(), Codebook::strongly_coherent(8, 8).unwrap())
    }

    #[test]
    fn noise_free_selection_rate_equals_local_maximum() {
        for seed in 0..5 {
            let (ch, tx, rx) = random_setup(seed);
            let y = noise_free_couplings(&ch, &tx, &rx).unwrap();
            let sets = initial_beam_selection(&y, 3, 2).unwrap();
            let sigma2 = sigma2_from_snr_db(5.0, 2);
            let gamma = gamma_from_sigma2(sigma2, 2);
            let sel = select_beams(&y, &sets, SelectionMode::Eig, gamma, 2, &tx, &rx).unwrap();
            let bf = digital_beamforming(&sel.estimate, &sets, &tx, &rx, 2).unwrap();
            let rs = equal_power(2);
            let direct = rate_report(&ch, &bf, &rs, sigma2).unwrap();
            let via = rate_report_from_couplings(&y, &bf, &rs, sigma2).unwrap();
            for k in 0..8 {
                let ev = gram_eigenvalues(sel.estimate.per_subcarrier[k].as_dmatrix());
                let lm: f64 = ev.iter().take(2).map(|&s| (1.0 + gamma * s).log2()).sum();
                assert!((direct.per_subcarrier_bits[k] - lm).abs() < 1e-8);
                assert!((via.per_subcarrier_bits[k] - lm).abs() < 1e-8);
            }
            let dbf = fully_digital_rate(&ch, gamma, 2).unwrap();
            assert!(direct.mean_bits_per_s_hz <= dbf.mean_bits_per_s_hz + 1e-9);
            let audit = audit_power_constraints(&bf, &rs);
            assert!(audit.passes(1e-8));
        }
    }

    #[test]
    fn identity_beamformers_audit_clean() {
        let bf = identity_bf(3, 2, 2);
        let a = audit_power_constraints(&bf, &equal_power(2));
        assert_eq!(a.worst_tx().1, 0.0);
        assert_eq!(a.worst_rx().1, 0.0);
    }

    #[test]
    fn omp_combiner_is_reported_not_rejected() {
        let (ch, tx, rx) = random_setup(3);
        let r = crate::reference::reference_beamformers(&ch, &tx, &rx, 2, 2).unwrap();
        let a = audit_power_constraints(&r.beamformers, &equal_power(2));
        // ‖F_P F_B‖² = N_S with R_s = I/N_S gives unit transmit power.
        assert!(a.worst_tx().1 < 1e-8);
        assert!(a.worst_rx().1 > 1e-6);
        let rate = rate_report(&ch, &r.beamformers, &equal_power(2), 0.1).unwrap();
        assert!(rate.mean_bits_per_s_hz > 0.0);
    }

    #[test]
    fn approximation_error_vanishes_with_gamma() {
        let h = vec![ComplexMatrix::from_real_diagonal(&[1.5, 0.5]); 4];
        let mut prev = f64::INFINITY;
        for gamma in [1e-1, 1e-3, 1e-6] {
            let t = approximation_terms(&h, gamma, 2);
            let e = approximation_error(&[t], gamma, 4).unwrap();
            assert!(e.epsilon < prev);
            prev = e.epsilon;
            if gamma <= 1e-3 {
                assert!((e.epsilon / e.closed_form - 1.0).abs() < 0.01);
            }
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn ze_covariance_structure() {
        let eye = ComplexMatrix::identity(2);
        let cov = ze_covariance(&eye, &eye, 0.5).unwrap();
        assert!(cov.max_abs_diff(&ComplexMatrix::identity(4).scale(0.5)) < 1e-15);

        let gf = gram(c(0.3, 0.2));
        let gw = gram(c(-0.5, 0.1));
        let a = ze_covariance(&gf, &gw, 1.0).unwrap();
        let b = ze_covariance(&gw, &gf, 1.0).unwrap();
        let gf_inv_conj = inv_hermitian(&ComplexMatrix::from_dmatrix(gf.map(|z| z.conj())).unwrap()).unwrap();
        let gw_inv = inv_hermitian(&gw).unwrap();
        assert!(a.max_abs_diff(&kron(&gf_inv_conj, &gw_inv)) < 1e-12);
        let gw_inv_conj = inv_hermitian(&ComplexMatrix::from_dmatrix(gw.map(|z| z.conj())).unwrap()).unwrap();
        let gf_inv = inv_hermitian(&gf).unwrap();
        assert!(b.max_abs_diff(&kron(&gw_inv_conj, &gf_inv)) < 1e-12);
    }

    #[test]
    fn orthogonal_u_moments() {
        let eye = ComplexMatrix::identity(2);
        let s = u_statistics(&eye, &eye, 1.0, 20_000, 5).unwrap();
        assert!((s.expected_u - 4.0).abs() < 1e-12);
        assert!((s.var_u - 4.0).abs() < 0.2, "{}", s.var_u);
        assert!((var_u_gaussian(&eye, &eye, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!((s.gamma_shape, s.gamma_scale), (4.0, 1.0));
    }

    #[test]
    fn correlated_gram_mean_u() {
        let g = gram(c(0.5, 0.0));
        let s = u_statistics(&g, &g, 1.0, 20_000, 6).unwrap();
        // tr([[1, .5], [.5, 1]]^{-1}) = 2/0.75
        let tr = 2.0 / 0.75;
        assert!((s.expected_u - tr * tr).abs() < 1e-12);
        assert!((s.empirical_mean_u / s.expected_u - 1.0).abs() < 0.03);
        let analytic = var_u_gaussian(&g, &g, 1.0).unwrap();
        assert!((s.var_u / analytic - 1.0).abs() < 0.1);
        let rows = noise_stats_rows(&s, &g, &g).unwrap();
        let csv = stats_csv(&rows);
        assert!(csv.starts_with("statistic,closed_form,empirical,rel_error\nmean_u,"));
    }

    #[test]
    fn v_statistics_examples() {
        let eye = ComplexMatrix::identity(2);
        let draws = sample_ze(&eye, &eye, 1.0, 50_000, 9).unwrap();
        let (m, v) = v_statistics(&ComplexMatrix::zeros(2, 2), &draws).unwrap();
        assert_eq!((m, v), (0.0, 0.0));
        let h = ComplexMatrix::new(2, 2, vec![c(1.0, 0.0), c(0.0, 1.0), c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!((frobenius_sq(&h) - 3.0).abs() < 1e-15);
        let (m, v) = v_statistics(&h, &draws).unwrap();
        assert!((v / 6.0 - 1.0).abs() < 0.03, "{v}");
        assert!(m.abs() < 3.0 * (6.0f64 / 50_000.0).sqrt());
    }

    #[test]
    fn ks_against_gamma() {
        let eye = ComplexMatrix::identity(2);
        let draws = sample_ze(&eye, &eye, 0.5, 20_000, 1).unwrap();
        let u = u_samples(&draws);
        let d = ks_statistic(&u, |x| gamma_cdf(x, 4.0, 0.5).unwrap());
        assert!(d < ks_critical_1pct(u.len()), "{d}");
        // The wrong scale is rejected.
        let d_bad = ks_statistic(&u, |x| gamma_cdf(x, 4.0, 0.6).unwrap());
        assert!(d_bad > ks_critical_1pct(u.len()));
    }

    #[test]
    fn snr_conversions() {
        assert!((sigma2_from_snr_db(0.0, 2) - 0.5).abs() < 1e-15);
        assert!((gamma_from_sigma2(sigma2_from_snr_db(10.0, 2), 2) - 10.0).abs() < 1e-12);
    }
}
