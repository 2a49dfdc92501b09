//! Explicit-CSI baseline: orthogonal matching pursuit over a codebook,
//! run across all subcarriers at once.
//!
//! The precoder approximates the leading right singular vectors of every
//! `H[k]` with one shared set of codebook atoms and a per-subcarrier
//! least-squares digital stage; the combiner does the same with the left
//! singular vectors.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::beamcore::BeamformerSet;
use crate::channel::ChannelRealization;
use crate::codebook::Codebook;
use crate::error::{HbfError, Result};
use crate::matkernel::{inv_hermitian, svd, ComplexMatrix, SvdResult, C64};

/// Residuals at or below this Frobenius norm are left unnormalized.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct OmpResult {
    /// Selected codebook columns, `N × N_RF`.
    pub analog: ComplexMatrix,
    /// `N_RF × N_S` per subcarrier.
    pub digital: Vec<ComplexMatrix>,
    pub selected_indices: Vec<usize>,
    /// `Σ_k ‖V_R[k]‖_F²` after each projection, before renormalization.
    pub residual_trace: Vec<f64>,
}

/// Greedy OMP of `targets[k]` (each `N × N_S`) onto `n_rf` atoms of `cb`.
pub fn omp_hybrid(targets: &[ComplexMatrix], cb: &Codebook, n_rf: usize) -> Result<OmpResult> {
    let first = targets
        .first()
        .ok_or_else(|| HbfError::InvalidArgument("OMP needs at least one subcarrier".into()))?;
    let (n, n_s) = first.shape();
    if n != cb.num_antennas() {
        return Err(HbfError::DimensionMismatch {
            op: "omp_hybrid",
            detail: format!("targets have {n} rows, codebook {} antennas", cb.num_antennas()),
        });
    }
    if targets.iter().any(|t| t.shape() != (n, n_s)) {
        return Err(HbfError::DimensionMismatch {
            op: "omp_hybrid",
            detail: "targets differ in shape across subcarriers".into(),
        });
    }
    if n_rf == 0 || n_rf > cb.num_beams() {
        return Err(HbfError::InvalidArgument(format!(
            "{n_rf} RF chains with a {}-beam codebook",
            cb.num_beams()
        )));
    }

    let atoms_h = cb.beams().adjoint();
    let mut residual: Vec<DMatrix<C64>> = targets.iter().map(|t| t.as_dmatrix().clone()).collect();
    let mut selected: Vec<usize> = Vec::with_capacity(n_rf);
    let mut residual_trace = Vec::with_capacity(n_rf);
    let mut fp = DMatrix::<C64>::zeros(n, 0);
    let mut gram_inv = DMatrix::<C64>::zeros(0, 0);

    for _ in 0..n_rf {
        let mut scores = vec![0.0; cb.num_beams()];
        for r in &residual {
            let c = atoms_h.as_dmatrix() * r;
            for (j, row) in c.row_iter().enumerate() {
                scores[j] += row.iter().map(|z| z.norm_sqr()).sum::<f64>();
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, &s) in scores.iter().enumerate() {
            if selected.contains(&j) {
                continue;
            }
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let (j, _) = best.expect("n_rf <= codebook size leaves an unused atom");
        selected.push(j);
        fp = cb.submatrix(&selected)?.into_dmatrix();

        let gram = ComplexMatrix::from_dmatrix_unchecked(fp.adjoint() * &fp);
        gram_inv = inv_hermitian(&gram)
            .map_err(|e| e.with_gram_context(format!("OMP atoms {selected:?}")))?
            .into_dmatrix();
        let projector = DMatrix::<C64>::identity(n, n) - &fp * &gram_inv * fp.adjoint();

        let mut total = 0.0;
        for (r, t) in residual.iter_mut().zip(targets) {
            *r = &projector * t.as_dmatrix();
            let norm = r.norm();
            total += norm * norm;
            if norm > RESIDUAL_FLOOR {
                *r /= C64::new(norm, 0.0);
            }
        }
        residual_trace.push(total);
    }

    let ls = &gram_inv * fp.adjoint();
    let digital = targets
        .iter()
        .map(|t| {
            let fb = &ls * t.as_dmatrix();
            let norm = (&fp * &fb).norm();
            let scaled = if norm > 0.0 {
                fb * C64::new((n_s as f64).sqrt() / norm, 0.0)
            } else {
                fb
            };
            ComplexMatrix::from_dmatrix_unchecked(scaled)
        })
        .collect();

    Ok(OmpResult {
        analog: ComplexMatrix::from_dmatrix_unchecked(fp),
        digital,
        selected_indices: selected,
        residual_trace,
    })
}

/// Both OMP runs and the beamformers they produce.
#[derive(Clone, Debug)]
pub struct ReferenceBeamformers {
    pub beamformers: BeamformerSet,
    pub tx: OmpResult,
    pub rx: OmpResult,
}

impl ReferenceBeamformers {
    /// `side,step,beam_index,residual` for both OMP runs.
    pub fn index_trace_csv(&self) -> String {
        let mut out = String::from("side,step,beam_index,residual\n");
        for (side, r) in [("tx", &self.tx), ("rx", &self.rx)] {
            for (step, (idx, res)) in r.selected_indices.iter().zip(&r.residual_trace).enumerate() {
                let _ = writeln!(out, "{side},{step},{idx},{res}");
            }
        }
        out
    }

    pub fn write_index_trace(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.index_trace_csv()).map_err(|e| HbfError::io(path, e))
    }
}

/// OMP precoder and combiner from precomputed per-subcarrier SVDs of `H[k]`.
pub fn reference_from_svds(
    svds: &[SvdResult],
    tx_cb: &Codebook,
    rx_cb: &Codebook,
    n_rf: usize,
    n_s: usize,
) -> Result<ReferenceBeamformers> {
    if n_s == 0 || n_s > n_rf {
        return Err(HbfError::InvalidArgument(format!(
            "{n_s} streams with {n_rf} RF chains"
        )));
    }
    let v: Vec<ComplexMatrix> = svds
        .iter()
        .map(|s| s.right.leading_columns(n_s))
        .collect::<Result<_>>()?;
    let u: Vec<ComplexMatrix> = svds
        .iter()
        .map(|s| s.left.leading_columns(n_s))
        .collect::<Result<_>>()?;
    let tx = omp_hybrid(&v, tx_cb, n_rf)?;
    let rx = omp_hybrid(&u, rx_cb, n_rf)?;
    let beamformers = BeamformerSet {
        tx_indices: tx.selected_indices.clone(),
        rx_indices: rx.selected_indices.clone(),
        tx_analog: tx.analog.clone(),
        rx_analog: rx.analog.clone(),
        tx_digital: tx.digital.clone(),
        rx_digital: rx.digital.clone(),
    };
    Ok(ReferenceBeamformers { beamformers, tx, rx })
}

/// Per-subcarrier SVDs of the channel.
pub fn channel_svds(chan: &ChannelRealization) -> Result<Vec<SvdResult>> {
    chan.per_subcarrier().iter().map(svd).collect()
}

/// OMP reference beamformers straight from a channel realization.
pub fn reference_beamformers(
    chan: &ChannelRealization,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
    n_rf: usize,
    n_s: usize,
) -> Result<ReferenceBeamformers> {
    if tx_cb.num_antennas() != chan.n_t() || rx_cb.num_antennas() != chan.n_r() {
        return Err(HbfError::DimensionMismatch {
            op: "reference_beamformers",
            detail: "codebook antenna counts do not match the channel".into(),
        });
    }
    reference_from_svds(&channel_svds(chan)?, tx_cb, rx_cb, n_rf, n_s)
}
