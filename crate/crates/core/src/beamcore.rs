//! Hybrid beamforming from implicit CSI.
//!
//! 1. Greedy power-based screening of `M` beam pairs from the coupling
//!    tensor, never reusing a transmit or receive beam.
//! 2. All `N_RF`-subsets of the screened beams on each side form the
//!    candidate analog matrices.
//! 3. For each candidate pair the effective channel is estimated directly
//!    from the couplings as `(W̄^H W̄)^{-1/2} Y (F̄^H F̄)^{-1/2}`.
//! 4. The pair maximizing the chosen criterion wins, and the digital
//!    beamformers follow from the SVD of its effective channel.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix2};

use crate::codebook::Codebook;
use crate::error::{HbfError, Result};
use crate::matkernel::{
    det_abs_sq, frobenius_sq, inv_sqrt_hermitian, squared_singular_values,
    squared_singular_values_2x2, svd, ComplexMatrix, C64,
};
use crate::training::CouplingTensor;

/// Beam selection criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SelectionMode {
    /// `Σ log2(1 + γσ²)` over the `N_S` strongest modes.
    Eig,
    /// Squared Frobenius norm (low-SNR key parameter).
    Fro,
    /// `|det|²` (high-SNR key parameter).
    Det,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 3] = [SelectionMode::Eig, SelectionMode::Fro, SelectionMode::Det];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::Eig => "eig",
            SelectionMode::Fro => "fro",
            SelectionMode::Det => "det",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eig" => Some(SelectionMode::Eig),
            "fro" => Some(SelectionMode::Fro),
            "det" => Some(SelectionMode::Det),
            _ => None,
        }
    }
}

/// All `r`-subsets of `0..m` in lexicographic order.
pub fn combinations(m: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r > m {
        return out;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let mut i = r;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + m - r {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSets {
    /// `(tx_beam, rx_beam)` in selection order.
    pub selected_pairs: Vec<(usize, usize)>,
    /// Positions into `selected_pairs` for each combo; shared by both sides.
    pub positions: Vec<Vec<usize>>,
    /// Transmit codebook indices per combo.
    pub tx_combos: Vec<Vec<usize>>,
    /// Receive codebook indices per combo.
    pub rx_combos: Vec<Vec<usize>>,
}

impl CandidateSets {
    pub fn m(&self) -> usize {
        self.selected_pairs.len()
    }

    pub fn n_rf(&self) -> usize {
        self.positions.first().map_or(0, |p| p.len())
    }

    pub fn num_tx_combos(&self) -> usize {
        self.tx_combos.len()
    }

    pub fn num_rx_combos(&self) -> usize {
        self.rx_combos.len()
    }

    /// Flat index of the combo pair `(i_f, i_w)`.
    pub fn flat_index(&self, i_f: usize, i_w: usize) -> usize {
        i_f * self.rx_combos.len() + i_w
    }

    /// Whether both combos only use the first `m` screened pairs, i.e. the
    /// pair also exists in the candidate sets built with `m` instead of `M`.
    pub fn within_first(&self, i_f: usize, i_w: usize, m: usize) -> bool {
        self.positions[i_f].iter().all(|&p| p < m) && self.positions[i_w].iter().all(|&p| p < m)
    }

    fn check(&self, i_f: usize, i_w: usize) -> Result<()> {
        if i_f >= self.tx_combos.len() {
            return Err(HbfError::IndexOutOfRange {
                what: "transmit combo",
                index: i_f,
                len: self.tx_combos.len(),
            });
        }
        if i_w >= self.rx_combos.len() {
            return Err(HbfError::IndexOutOfRange {
                what: "receive combo",
                index: i_w,
                len: self.rx_combos.len(),
            });
        }
        Ok(())
    }
}

/// Greedy screening of `m` beam pairs by received energy, then the
/// `C(m, n_rf)` candidate combos per side.
///
/// Each round takes the strongest remaining pair and removes its transmit
/// and receive beams from later rounds. Ties go to the smallest
/// `(n_w, n_f)`.
pub fn initial_beam_selection(y: &CouplingTensor, m: usize, n_rf: usize) -> Result<CandidateSets> {
    if n_rf == 0 {
        return Err(HbfError::Config("at least one RF chain required".into()));
    }
    if m < n_rf {
        return Err(HbfError::Config(format!(
            "M = {m} candidate pairs is fewer than {n_rf} RF chains"
        )));
    }
    let available = y.n_w().min(y.n_f());
    if m > available {
        return Err(HbfError::Config(format!(
            "M = {m} exceeds the {available} beam pairs available without reuse"
        )));
    }
    let energy = y.energy_table();
    let n_f = y.n_f();
    let mut rx_used = vec![false; y.n_w()];
    let mut tx_used = vec![false; n_f];
    let mut selected_pairs = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(usize, usize, f64)> = None;
        for w in (0..y.n_w()).filter(|&w| !rx_used[w]) {
            for f in (0..n_f).filter(|&f| !tx_used[f]) {
                let e = energy[w * n_f + f];
                if best.map_or(true, |(_, _, b)| e > b) {
                    best = Some((w, f, e));
                }
            }
        }
        let (w, f, _) = best.ok_or_else(|| {
            HbfError::Config("ran out of beams during initial selection".into())
        })?;
        rx_used[w] = true;
        tx_used[f] = true;
        selected_pairs.push((f, w));
    }
    let positions = combinations(m, n_rf);
    let tx_combos = positions
        .iter()
        .map(|c| c.iter().map(|&p| selected_pairs[p].0).collect())
        .collect();
    let rx_combos = positions
        .iter()
        .map(|c| c.iter().map(|&p| selected_pairs[p].1).collect())
        .collect();
    Ok(CandidateSets {
        selected_pairs,
        positions,
        tx_combos,
        rx_combos,
    })
}

#[derive(Clone, Debug)]
pub struct EffectiveChannelEstimate {
    pub per_subcarrier: Vec<ComplexMatrix>,
    pub tx_combo_index: usize,
    pub rx_combo_index: usize,
    pub flat_index: usize,
}

/// `(B̄^H B̄)^{-1/2}` for the codebook columns `indices`.
pub fn gram_inv_sqrt(cb: &Codebook, indices: &[usize]) -> Result<ComplexMatrix> {
    inv_sqrt_hermitian(&cb.gram(indices)?)
}

fn tagged_whitener(cb: &Codebook, indices: &[usize], side: &str, combo: usize) -> Result<ComplexMatrix> {
    gram_inv_sqrt(cb, indices)
        .map_err(|e| e.with_gram_context(format!("{side} combo {combo} beams {indices:?}")))
}

/// `Ĥ_E[k] = (W̄^H W̄)^{-1/2} Y[k] (F̄^H F̄)^{-1/2}` for the combo pair
/// `(i_f, i_w)`.
pub fn estimate_effective_channel(
    y: &CouplingTensor,
    sets: &CandidateSets,
    i_f: usize,
    i_w: usize,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
) -> Result<EffectiveChannelEstimate> {
    sets.check(i_f, i_w)?;
    let tx = &sets.tx_combos[i_f];
    let rx = &sets.rx_combos[i_w];
    let af = tagged_whitener(tx_cb, tx, "transmit", i_f)?;
    let aw = tagged_whitener(rx_cb, rx, "receive", i_w)?;
    let per_subcarrier = (0..y.subcarriers())
        .map(|k| {
            let m = aw.as_dmatrix() * y.gather(rx, tx, k) * af.as_dmatrix();
            ComplexMatrix::from_dmatrix_unchecked(m)
        })
        .collect();
    Ok(EffectiveChannelEstimate {
        per_subcarrier,
        tx_combo_index: i_f,
        rx_combo_index: i_w,
        flat_index: sets.flat_index(i_f, i_w),
    })
}

/// Per-subcarrier value of a criterion given the descending squared
/// singular values of the effective channel.
#[inline]
fn criterion_from_spectrum(spec: &[f64], mode: SelectionMode, gamma: f64, n_s: usize) -> f64 {
    match mode {
        SelectionMode::Eig => spec.iter().take(n_s).map(|&s| (gamma * s).ln_1p()).sum::<f64>() / std::f64::consts::LN_2,
        SelectionMode::Fro => spec.iter().sum(),
        SelectionMode::Det => spec.iter().product(),
    }
}

/// `Σ_k f(Ĥ_E[k])` for the chosen criterion.
pub fn selection_criterion(
    est: &EffectiveChannelEstimate,
    mode: SelectionMode,
    gamma: f64,
    n_s: usize,
) -> Result<f64> {
    if mode == SelectionMode::Eig && !(gamma > 0.0) {
        return Err(HbfError::InvalidArgument(format!(
            "eig criterion needs gamma > 0, got {gamma}"
        )));
    }
    let mut total = 0.0;
    for h in &est.per_subcarrier {
        total += match mode {
            SelectionMode::Fro => frobenius_sq(h),
            SelectionMode::Det => det_abs_sq(h)?,
            SelectionMode::Eig => {
                criterion_from_spectrum(&squared_singular_values(h)?, mode, gamma, n_s)
            }
        };
    }
    Ok(total)
}

/// A combo pair left out of the selection because a Gram matrix could not
/// be whitened.
#[derive(Clone, Debug)]
pub struct SkippedCombo {
    pub tx_combo_index: usize,
    pub rx_combo_index: usize,
    pub reason: String,
}

/// Squared singular values of every candidate effective channel.
///
/// The spectra do not depend on γ or on the criterion, so one table serves
/// every SNR point (for noise-free couplings) and all three criteria.
#[derive(Clone, Debug)]
pub struct CandidateTable {
    n_rf: usize,
    subcarriers: usize,
    num_rx_combos: usize,
    /// Per flat index: `K·N_RF` values, subcarrier-major; `None` if skipped.
    spectra: Vec<Option<Vec<f64>>>,
    skipped: Vec<SkippedCombo>,
}

impl CandidateTable {
    pub fn build(
        y: &CouplingTensor,
        sets: &CandidateSets,
        tx_cb: &Codebook,
        rx_cb: &Codebook,
    ) -> Result<Self> {
        let n_rf = sets.n_rf();
        let kk = y.subcarriers();
        let tx_w: Vec<Result<ComplexMatrix>> = sets
            .tx_combos
            .iter()
            .enumerate()
            .map(|(i, c)| tagged_whitener(tx_cb, c, "transmit", i))
            .collect();
        let rx_w: Vec<Result<ComplexMatrix>> = sets
            .rx_combos
            .iter()
            .enumerate()
            .map(|(i, c)| tagged_whitener(rx_cb, c, "receive", i))
            .collect();

        let mut spectra = Vec::with_capacity(tx_w.len() * rx_w.len());
        let mut skipped = Vec::new();
        for (i_f, af) in tx_w.iter().enumerate() {
            for (i_w, aw) in rx_w.iter().enumerate() {
                let (af, aw) = match (af, aw) {
                    (Ok(af), Ok(aw)) => (af, aw),
                    (Err(e), _) | (_, Err(e)) => {
                        skipped.push(SkippedCombo {
                            tx_combo_index: i_f,
                            rx_combo_index: i_w,
                            reason: e.to_string(),
                        });
                        spectra.push(None);
                        continue;
                    }
                };
                let tx = &sets.tx_combos[i_f];
                let rx = &sets.rx_combos[i_w];
                let mut spec = Vec::with_capacity(kk * n_rf);
                if n_rf == 2 {
                    let af2 = Matrix2::from_fn(|r, c| af[(r, c)]);
                    let aw2 = Matrix2::from_fn(|r, c| aw[(r, c)]);
                    let (p00, p01, p10, p11) = (
                        y.pair(rx[0], tx[0]),
                        y.pair(rx[0], tx[1]),
                        y.pair(rx[1], tx[0]),
                        y.pair(rx[1], tx[1]),
                    );
                    for k in 0..kk {
                        let yk = Matrix2::new(p00[k], p01[k], p10[k], p11[k]);
                        let h = aw2 * yk * af2;
                        spec.extend_from_slice(&squared_singular_values_2x2(
                            h[(0, 0)],
                            h[(0, 1)],
                            h[(1, 0)],
                            h[(1, 1)],
                        ));
                    }
                } else {
                    for k in 0..kk {
                        let h: DMatrix<C64> = aw.as_dmatrix() * y.gather(rx, tx, k) * af.as_dmatrix();
                        spec.extend(squared_singular_values(&h)?);
                    }
                }
                spectra.push(Some(spec));
            }
        }
        Ok(CandidateTable {
            n_rf,
            subcarriers: kk,
            num_rx_combos: rx_w.len(),
            spectra,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    pub fn skipped(&self) -> &[SkippedCombo] {
        &self.skipped
    }

    /// Descending squared singular values of `Ĥ_E[k]` for a flat index.
    pub fn spectrum(&self, flat: usize, k: usize) -> Option<&[f64]> {
        self.spectra[flat]
            .as_ref()
            .map(|s| &s[k * self.n_rf..(k + 1) * self.n_rf])
    }

    /// `Σ_k f(Ĥ_E[k])` for one flat index; `None` for skipped combos.
    pub fn score(&self, flat: usize, mode: SelectionMode, gamma: f64, n_s: usize) -> Option<f64> {
        let spec = self.spectra[flat].as_ref()?;
        Some(
            spec.chunks_exact(self.n_rf)
                .map(|s| criterion_from_spectrum(s, mode, gamma, n_s))
                .sum(),
        )
    }

    /// Scores of every combo pair, in flat order.
    pub fn scores(&self, mode: SelectionMode, gamma: f64, n_s: usize) -> Vec<Option<f64>> {
        (0..self.len()).map(|i| self.score(i, mode, gamma, n_s)).collect()
    }

    /// Argmax over the combo pairs accepted by `allow(i_f, i_w)`; ties go to
    /// the smallest flat index.
    pub fn best(
        &self,
        mode: SelectionMode,
        gamma: f64,
        n_s: usize,
        allow: impl Fn(usize, usize) -> bool,
    ) -> Result<(usize, usize)> {
        if mode == SelectionMode::Eig && !(gamma > 0.0) {
            return Err(HbfError::InvalidArgument(format!(
                "eig criterion needs gamma > 0, got {gamma}"
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        let mut considered = 0;
        for flat in 0..self.len() {
            let (i_f, i_w) = (flat / self.num_rx_combos, flat % self.num_rx_combos);
            if !allow(i_f, i_w) {
                continue;
            }
            considered += 1;
            if let Some(s) = self.score(flat, mode, gamma, n_s) {
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((flat, s));
                }
            }
        }
        best.map(|(flat, _)| (flat / self.num_rx_combos, flat % self.num_rx_combos))
            .ok_or(HbfError::SelectionFailed(considered))
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    /// Diagnostic CSV: `flat_index,i_f,i_w,score` with an empty score for
    /// skipped combos.
    pub fn scores_csv(&self, mode: SelectionMode, gamma: f64, n_s: usize) -> String {
        let mut out = String::from("flat_index,i_f,i_w,score\n");
        for (flat, s) in self.scores(mode, gamma, n_s).iter().enumerate() {
            let (i_f, i_w) = (flat / self.num_rx_combos, flat % self.num_rx_combos);
            match s {
                Some(v) => {
                    let _ = writeln!(out, "{flat},{i_f},{i_w},{v}");
                }
                None => {
                    let _ = writeln!(out, "{flat},{i_f},{i_w},");
                }
            }
        }
        out
    }

    pub fn write_scores_csv(&self, path: &Path, mode: SelectionMode, gamma: f64, n_s: usize) -> Result<()> {
        std::fs::write(path, self.scores_csv(mode, gamma, n_s)).map_err(|e| HbfError::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub tx_combo_index: usize,
    pub rx_combo_index: usize,
    pub estimate: EffectiveChannelEstimate,
    pub skipped: Vec<SkippedCombo>,
}

/// Evaluates every candidate pair and returns the best one with its
/// effective-channel estimate.
pub fn select_beams(
    y: &CouplingTensor,
    sets: &CandidateSets,
    mode: SelectionMode,
    gamma: f64,
    n_s: usize,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
) -> Result<Selection> {
    if sets.tx_combos.is_empty() || sets.rx_combos.is_empty() {
        return Err(HbfError::InvalidArgument("empty candidate sets".into()));
    }
    let table = CandidateTable::build(y, sets, tx_cb, rx_cb)?;
    let (i_f, i_w) = table.best(mode, gamma, n_s, |_, _| true)?;
    let estimate = estimate_effective_channel(y, sets, i_f, i_w, tx_cb, rx_cb)?;
    Ok(Selection {
        tx_combo_index: i_f,
        rx_combo_index: i_w,
        estimate,
        skipped: table.skipped,
    })
}

/// Analog and per-subcarrier digital beamformers for both link ends.
#[derive(Clone, Debug)]
pub struct BeamformerSet {
    pub tx_indices: Vec<usize>,
    pub rx_indices: Vec<usize>,
    /// `F_P`, `N_T × N_RF`.
    pub tx_analog: ComplexMatrix,
    /// `W_P`, `N_R × N_RF`.
    pub rx_analog: ComplexMatrix,
    /// `F_B[k]`, `N_RF × N_S`.
    pub tx_digital: Vec<ComplexMatrix>,
    /// `W_B[k]`, `N_RF × N_S`.
    pub rx_digital: Vec<ComplexMatrix>,
}

impl BeamformerSet {
    pub fn subcarriers(&self) -> usize {
        self.tx_digital.len()
    }

    pub fn n_s(&self) -> usize {
        self.tx_digital.first().map_or(0, |m| m.cols())
    }
}

/// `F_B[k] = (F̄^H F̄)^{-1/2} V[:, :N_S]` and `W_B[k] = (W̄^H W̄)^{-1/2} U[:, :N_S]`
/// from the SVD `Ĥ_E[k] = U Σ V^H`.
pub fn digital_beamforming(
    est: &EffectiveChannelEstimate,
    sets: &CandidateSets,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
    n_s: usize,
) -> Result<BeamformerSet> {
    sets.check(est.tx_combo_index, est.rx_combo_index)?;
    let tx = sets.tx_combos[est.tx_combo_index].clone();
    let rx = sets.rx_combos[est.rx_combo_index].clone();
    if n_s == 0 || n_s > tx.len() {
        return Err(HbfError::InvalidArgument(format!(
            "{n_s} streams requested with {} RF chains",
            tx.len()
        )));
    }
    let af = tagged_whitener(tx_cb, &tx, "transmit", est.tx_combo_index)?;
    let aw = tagged_whitener(rx_cb, &rx, "receive", est.rx_combo_index)?;
    let mut tx_digital = Vec::with_capacity(est.per_subcarrier.len());
    let mut rx_digital = Vec::with_capacity(est.per_subcarrier.len());
    for h in &est.per_subcarrier {
        let s = svd(h)?;
        tx_digital.push(&af * &s.right.leading_columns(n_s)?);
        rx_digital.push(&aw * &s.left.leading_columns(n_s)?);
    }
    Ok(BeamformerSet {
        tx_analog: tx_cb.submatrix(&tx)?,
        rx_analog: rx_cb.submatrix(&rx)?,
        tx_indices: tx,
        rx_indices: rx,
        tx_digital,
        rx_digital,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelRealization, ClusterParams};
    use crate::training::noise_free_couplings;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn estimate_of(mats: Vec<ComplexMatrix>) -> EffectiveChannelEstimate {
        EffectiveChannelEstimate {
            per_subcarrier: mats,
            tx_combo_index: 0,
            rx_combo_index: 0,
            flat_index: 0,
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, cc: usize) -> ComplexMatrix {
        ComplexMatrix::from_dmatrix(DMatrix::from_fn(r, cc, |_, _| {
            c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }))
        .unwrap()
    }

    #[test]
    fn combinations_are_lexicographic_and_counted() {
        assert_eq!(
            combinations(4, 2),
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(combinations(5, 2).len(), 10);
        assert_eq!(combinations(6, 3).len(), 20);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(combinations(2, 1), vec![vec![0], vec![1]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn single_pair_delta_tensor() {
        let y = CouplingTensor::from_fn(8, 8, 4, |w, f, _| {
            if (w, f) == (3, 6) {
                c(1.0, 0.0)
            } else {
                c(0.0, 0.0)
            }
        });
        let sets = initial_beam_selection(&y, 1, 1).unwrap();
        assert_eq!(sets.selected_pairs, vec![(6, 3)]);
        assert_eq!(sets.tx_combos, vec![vec![6]]);
        assert_eq!(sets.rx_combos, vec![vec![3]]);
    }

    #[test]
    fn four_pairs_give_six_combos_without_reuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = CouplingTensor::from_fn(8, 8, 4, |_, _, _| c(rng.gen(), rng.gen()));
        let sets = initial_beam_selection(&y, 4, 2).unwrap();
        assert_eq!(sets.num_tx_combos(), 6);
        assert_eq!(sets.num_rx_combos(), 6);
        let mut tx: Vec<usize> = sets.selected_pairs.iter().map(|p| p.0).collect();
        let mut rx: Vec<usize> = sets.selected_pairs.iter().map(|p| p.1).collect();
        tx.sort();
        tx.dedup();
        rx.sort();
        rx.dedup();
        assert_eq!((tx.len(), rx.len()), (4, 4));
    }

    #[test]
    fn greedy_excludes_both_beams_of_a_chosen_pair() {
        // Energies: (0,0)=10, (0,1)=9, (1,0)=8, (1,1)=1. Without exclusion
        // the second pick would be (0,1).
        let e = [[10.0, 9.0], [8.0, 1.0]];
        let y = CouplingTensor::from_fn(2, 2, 1, |w, f, _| c(f64::sqrt(e[w][f]), 0.0));
        let sets = initial_beam_selection(&y, 2, 1).unwrap();
        assert_eq!(sets.selected_pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn ties_go_to_smallest_receive_then_transmit_index() {
        let y = CouplingTensor::from_fn(3, 3, 2, |_, _, _| c(1.0, 0.0));
        let sets = initial_beam_selection(&y, 3, 1).unwrap();
        assert_eq!(sets.selected_pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn selection_bounds() {
        let y = CouplingTensor::zeros(4, 6, 2);
        assert!(matches!(initial_beam_selection(&y, 1, 2), Err(HbfError::Config(_))));
        assert!(matches!(initial_beam_selection(&y, 5, 2), Err(HbfError::Config(_))));
        assert!(initial_beam_selection(&y, 4, 2).is_ok());
    }

    #[test]
    fn criterion_examples() {
        let eye = estimate_of(vec![ComplexMatrix::identity(2)]);
        assert!((selection_criterion(&eye, SelectionMode::Eig, 1.0, 2).unwrap() - 2.0).abs() < 1e-12);
        assert!((selection_criterion(&eye, SelectionMode::Fro, 1.0, 2).unwrap() - 2.0).abs() < 1e-12);
        assert!((selection_criterion(&eye, SelectionMode::Det, 1.0, 2).unwrap() - 1.0).abs() < 1e-12);

        let d = estimate_of(vec![ComplexMatrix::from_real_diagonal(&[2.0, 1.0])]);
        let eig = selection_criterion(&d, SelectionMode::Eig, 1.0, 2).unwrap();
        assert!((eig - (5f64.log2() + 1.0)).abs() < 1e-12);
        assert!((eig - 3.3219).abs() < 1e-4);
        assert!((selection_criterion(&d, SelectionMode::Fro, 1.0, 2).unwrap() - 5.0).abs() < 1e-12);
        assert!((selection_criterion(&d, SelectionMode::Det, 1.0, 2).unwrap() - 4.0).abs() < 1e-12);
        assert!(selection_criterion(&d, SelectionMode::Eig, 0.0, 2).is_err());
    }

    #[test]
    fn criteria_are_unitarily_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let h = random_matrix(&mut rng, 2, 2);
            let q = svd(&random_matrix(&mut rng, 2, 2)).unwrap().left;
            let a = estimate_of(vec![h.clone()]);
            let b = estimate_of(vec![&q * &h]);
            for mode in SelectionMode::ALL {
                let x = selection_criterion(&a, mode, 0.7, 2).unwrap();
                let y = selection_criterion(&b, mode, 0.7, 2).unwrap();
                assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "{mode:?}");
            }
        }
    }

    fn two_path_setup() -> (ChannelRealization, Codebook) {
        let cb = Codebook::orthogonal(8).unwrap();
        let params = ClusterParams::discrete_paths(&[
            (c(1.0, 0.0), 0, 5.0, 5.0),
            (c(0.1f64.sqrt(), 0.0), 0, 30.0, -15.0),
        ]);
        (ChannelRealization::from_params(params, 8, 8, 4, 1.0).unwrap(), cb)
    }

    #[test]
    fn two_path_screening_steers_at_both_paths() {
        let (ch, cb) = two_path_setup();
        let y = noise_free_couplings(&ch, &cb, &cb).unwrap();
        let sets = initial_beam_selection(&y, 2, 2).unwrap();
        let angle = |i: usize| cb.steering_angles()[i];
        let (f0, w0) = sets.selected_pairs[0];
        assert_eq!((angle(f0), angle(w0)), (0.0, 0.0));
        let (f1, w1) = sets.selected_pairs[1];
        assert!((angle(f1) - 30.0).abs() < 1e-9);
        assert!((angle(w1) + 14.4775).abs() < 1e-3);
    }

    #[test]
    fn orthogonal_estimate_is_the_coupling_submatrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = Codebook::orthogonal(8).unwrap();
        let y = CouplingTensor::from_fn(8, 8, 3, |_, _, _| c(rng.gen(), rng.gen()));
        let sets = initial_beam_selection(&y, 3, 2).unwrap();
        for i_f in 0..3 {
            for i_w in 0..3 {
                let est = estimate_effective_channel(&y, &sets, i_f, i_w, &cb, &cb).unwrap();
                assert_eq!(est.flat_index, i_f * 3 + i_w);
                for k in 0..3 {
                    let want = y.gather(&sets.rx_combos[i_w], &sets.tx_combos[i_f], k);
                    let got = est.per_subcarrier[k].as_dmatrix();
                    assert!((got - want).camax() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn noise_free_estimate_matches_whitened_channel() {
        use crate::channel::{sample_channel, ChannelConfig, LinkDims};
        let dims = LinkDims {
            n_t: 8,
            n_r: 8,
            n_rf: 2,
            subcarriers: 8,
        };
        let ch = sample_channel(dims, &ChannelConfig::default(), &mut ChaCha8Rng::seed_from_u64(12))
            .unwrap();
        let tx = Codebook::strongly_coherent(8, 8).unwrap();
        let rx = Codebook::weakly_coherent(9, 8).unwrap();
        let y = noise_free_couplings(&ch, &tx, &rx).unwrap();
        let sets = initial_beam_selection(&y, 3, 2).unwrap();
        let est = estimate_effective_channel(&y, &sets, 1, 2, &tx, &rx).unwrap();
        let fp = tx.submatrix(&sets.tx_combos[1]).unwrap();
        let wp = rx.submatrix(&sets.rx_combos[2]).unwrap();
        let af = inv_sqrt_hermitian(&(&fp.adjoint() * &fp)).unwrap();
        let aw = inv_sqrt_hermitian(&(&wp.adjoint() * &wp)).unwrap();
        for k in 0..8 {
            let h = ch.channel_matrix(k).unwrap();
            let he = &(&(&(&aw * &wp.adjoint()) * h) * &fp) * &af;
            assert!(est.per_subcarrier[k].max_abs_diff(&he) < 1e-10);
        }
    }

    #[test]
    fn single_rf_chain_estimate_is_the_coupling() {
        let cb = Codebook::strongly_coherent(8, 8).unwrap();
        let y = CouplingTensor::from_fn(8, 8, 2, |w, f, k| c((w * 3 + f) as f64, k as f64));
        let sets = initial_beam_selection(&y, 2, 1).unwrap();
        let est = estimate_effective_channel(&y, &sets, 1, 0, &cb, &cb).unwrap();
        for k in 0..2 {
            let want = y.get(sets.rx_combos[0][0], sets.tx_combos[1][0], k);
            assert!((est.per_subcarrier[k][(0, 0)] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn table_scores_match_direct_criterion() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let tx = Codebook::weakly_coherent(9, 8).unwrap();
        let rx = Codebook::strongly_coherent(8, 8).unwrap();
        for n_rf in [2, 3] {
            let y = CouplingTensor::from_fn(8, 9, 5, |_, _, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let sets = initial_beam_selection(&y, 4, n_rf).unwrap();
            let table = CandidateTable::build(&y, &sets, &tx, &rx).unwrap();
            assert_eq!(table.len(), sets.num_tx_combos() * sets.num_rx_combos());
            for i_f in 0..sets.num_tx_combos() {
                for i_w in 0..sets.num_rx_combos() {
                    let est = estimate_effective_channel(&y, &sets, i_f, i_w, &tx, &rx).unwrap();
                    for mode in SelectionMode::ALL {
                        let direct = selection_criterion(&est, mode, 2.5, 2).unwrap();
                        let fast = table.score(sets.flat_index(i_f, i_w), mode, 2.5, 2).unwrap();
                        assert!((direct - fast).abs() <= 1e-9 * direct.abs().max(1e-12), "{mode:?} {direct} {fast}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_candidate_pair_is_returned() {
        let cb = Codebook::orthogonal(8).unwrap();
        let y = CouplingTensor::from_fn(8, 8, 2, |w, f, _| c((w + 2 * f) as f64, 0.0));
        let sets = initial_beam_selection(&y, 2, 2).unwrap();
        let sel = select_beams(&y, &sets, SelectionMode::Det, 1.0, 2, &cb, &cb).unwrap();
        assert_eq!((sel.tx_combo_index, sel.rx_combo_index), (0, 0));
    }

    #[test]
    fn ill_conditioned_combos_are_skipped() {
        // Beams 0 and 1 are identical, so any combo holding both is singular.
        let cb = Codebook::from_angles(&[10.0, 10.0, -40.0, 60.0], 4).unwrap();
        let y = CouplingTensor::from_fn(4, 4, 2, |w, f, _| {
            let big = if w == f { 5.0 - w as f64 } else { 0.1 };
            c(big, 0.0)
        });
        let sets = initial_beam_selection(&y, 3, 2).unwrap();
        assert_eq!(sets.tx_combos[0], vec![0, 1]);
        let table = CandidateTable::build(&y, &sets, &cb, &cb).unwrap();
        // Transmit combo 0 and receive combo 0 each poison a row or column.
        assert_eq!(table.skipped().len(), 3 + 3 - 1);
        assert!(table.skipped()[0].reason.contains("combo 0"));
        let sel = select_beams(&y, &sets, SelectionMode::Fro, 1.0, 2, &cb, &cb).unwrap();
        assert_ne!(sel.tx_combo_index, 0);
        assert_ne!(sel.rx_combo_index, 0);
        assert!(table.scores_csv(SelectionMode::Fro, 1.0, 2).contains("\n0,0,0,\n"));
        let err = estimate_effective_channel(&y, &sets, 0, 1, &cb, &cb).unwrap_err();
        assert!(matches!(err, HbfError::IllConditionedGram { ref context, .. } if context.contains("transmit combo 0")));
    }

    #[test]
    fn all_combos_singular_fails_selection() {
        let cb = Codebook::from_angles(&[10.0, 10.0], 4).unwrap();
        let y = CouplingTensor::from_fn(2, 2, 1, |_, _, _| c(1.0, 0.0));
        let sets = initial_beam_selection(&y, 2, 2).unwrap();
        assert!(matches!(
            select_beams(&y, &sets, SelectionMode::Eig, 1.0, 2, &cb, &cb),
            Err(HbfError::SelectionFailed(1))
        ));
    }

    #[test]
    fn diagonal_effective_channel_gives_identity_digital_stage() {
        let cb = Codebook::orthogonal(4).unwrap();
        let y = CouplingTensor::from_fn(4, 4, 1, |w, f, _| {
            if w == f && w < 2 {
                c(2.0 - w as f64, 0.0)
            } else {
                c(0.0, 0.0)
            }
        });
        let sets = initial_beam_selection(&y, 2, 2).unwrap();
        let est = estimate_effective_channel(&y, &sets, 0, 0, &cb, &cb).unwrap();
        let bf = digital_beamforming(&est, &sets, &cb, &cb, 2).unwrap();
        assert!(bf.tx_digital[0].max_abs_diff(&ComplexMatrix::identity(2)) < 1e-12);
        assert!(bf.rx_digital[0].max_abs_diff(&ComplexMatrix::identity(2)) < 1e-12);
    }

    #[test]
    fn rank_one_channel_single_stream() {
        let cb = Codebook::orthogonal(4).unwrap();
        let u = [c(0.6, 0.0), c(0.0, 0.8)];
        let v = [c(0.8, 0.0), c(0.6, 0.0)];
        let y = CouplingTensor::from_fn(2, 2, 1, |w, f, _| u[w] * 3.0 * v[f].conj());
        let sets = initial_beam_selection(&y, 2, 2).unwrap();
        let est = estimate_effective_channel(&y, &sets, 0, 0, &cb, &cb).unwrap();
        let bf = digital_beamforming(&est, &sets, &cb, &cb, 1).unwrap();
        let fb = &bf.tx_digital[0];
        let wb = &bf.rx_digital[0];
        // Parallel up to a phase, mapped through the selection order.
        let order_f = &sets.tx_combos[0];
        let order_w = &sets.rx_combos[0];
        let ip_f: C64 = (0..2).map(|i| v[order_f[i]].conj() * fb[(i, 0)]).sum();
        let ip_w: C64 = (0..2).map(|i| u[order_w[i]].conj() * wb[(i, 0)]).sum();
        assert!((ip_f.norm() - 1.0).abs() < 1e-12);
        assert!((ip_w.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn digital_stage_meets_power_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tx = Codebook::strongly_coherent(8, 8).unwrap();
        let rx = Codebook::weakly_coherent(9, 8).unwrap();
        let y = CouplingTensor::from_fn(9, 8, 4, |_, _, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let sets = initial_beam_selection(&y, 4, 2).unwrap();
        let sel = select_beams(&y, &sets, SelectionMode::Eig, 3.0, 2, &tx, &rx).unwrap();
        let bf = digital_beamforming(&sel.estimate, &sets, &tx, &rx, 2).unwrap();
        let rs = ComplexMatrix::identity(2).scale(0.5);
        for k in 0..4 {
            let fpfb = &bf.tx_analog * &bf.tx_digital[k];
            let p = (&(&fpfb * &rs) * &fpfb.adjoint()).trace();
            assert!((p.re - 1.0).abs() < 1e-8 && p.im.abs() < 1e-8);
            let wpwb = &bf.rx_analog * &bf.rx_digital[k];
            let g = &wpwb.adjoint() * &wpwb;
            assert!(g.max_abs_diff(&ComplexMatrix::identity(2)) < 1e-8);
        }
        assert!(digital_beamforming(&sel.estimate, &sets, &tx, &rx, 3).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in SelectionMode::ALL {
            assert_eq!(SelectionMode::parse(m.name()), Some(m));
        }
        assert_eq!(SelectionMode::parse("svd"), None);
    }
}
