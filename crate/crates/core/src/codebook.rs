//! ULA steering-vector codebooks.
//!
//! All arrays use half-wavelength spacing, so entry `n` of a steering vector
//! towards `φ` is `exp(jπ·sin(φ)·n)/√N`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{HbfError, Result};
use crate::matkernel::{ComplexMatrix, C64};

/// Unit-norm array response for an arbitrary angle (no range check).
pub(crate) fn array_response(angle_deg: f64, num_antennas: usize) -> DVector<C64> {
    let spatial = PI * angle_deg.to_radians().sin();
    let amp = 1.0 / (num_antennas as f64).sqrt();
    DVector::from_iterator(
        num_antennas,
        (0..num_antennas).map(|n| C64::from_polar(amp, spatial * n as f64)),
    )
}

/// Steering vector towards `angle_deg` ∈ [−90°, 90°].
pub fn steering_vector(angle_deg: f64, num_antennas: usize) -> Result<DVector<C64>> {
    if num_antennas == 0 {
        return Err(HbfError::InvalidArgument(
            "steering vector needs at least one antenna".into(),
        ));
    }
    if !(-90.0..=90.0).contains(&angle_deg) {
        return Err(HbfError::InvalidArgument(format!(
            "steering angle {angle_deg} deg outside [-90, 90]"
        )));
    }
    Ok(array_response(angle_deg, num_antennas))
}

/// The three codebook families used in the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodebookKind {
    Orthogonal,
    WeaklyCoherent,
    StronglyCoherent,
}

impl CodebookKind {
    pub const ALL: [CodebookKind; 3] = [
        CodebookKind::Orthogonal,
        CodebookKind::WeaklyCoherent,
        CodebookKind::StronglyCoherent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CodebookKind::Orthogonal => "orthogonal",
            CodebookKind::WeaklyCoherent => "weak",
            CodebookKind::StronglyCoherent => "strong",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "orthogonal" | "orth" => Some(CodebookKind::Orthogonal),
            "weak" | "weakly-coherent" => Some(CodebookKind::WeaklyCoherent),
            "strong" | "strongly-coherent" => Some(CodebookKind::StronglyCoherent),
            _ => None,
        }
    }

    /// Codebook of this family for an array of `num_antennas` elements, at
    /// the sizes used in the evaluation: N beams for the orthogonal family,
    /// N + N/8 for the weakly coherent one and N for the strongly coherent one.
    pub fn build(self, num_antennas: usize) -> Result<Codebook> {
        match self {
            CodebookKind::Orthogonal => Codebook::orthogonal(num_antennas),
            CodebookKind::WeaklyCoherent => {
                Codebook::weakly_coherent(num_antennas + num_antennas / 8, num_antennas)
            }
            CodebookKind::StronglyCoherent => Codebook::strongly_coherent(num_antennas, num_antennas),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Codebook {
    num_antennas: usize,
    beams: ComplexMatrix,
    steering_angles: Vec<f64>,
    coherence: f64,
}

/// `(180/π)·asin((n_f − n/2)/(n/2))` for `n_f = 1..=n`.
fn sine_grid_angles(n: usize) -> Vec<f64> {
    let half = n as f64 / 2.0;
    (1..=n)
        .map(|nf| {
            let s = ((nf as f64 - half) / half).clamp(-1.0, 1.0);
            s.asin().to_degrees()
        })
        .collect()
}

impl Codebook {
    /// Builds a codebook from explicit steering angles.
    pub fn from_angles(angles_deg: &[f64], num_antennas: usize) -> Result<Self> {
        if angles_deg.is_empty() {
            return Err(HbfError::InvalidArgument("codebook needs at least one beam".into()));
        }
        let columns = angles_deg
            .iter()
            .map(|&a| steering_vector(a, num_antennas))
            .collect::<Result<Vec<_>>>()?;
        let beams = ComplexMatrix::from_columns(&columns)?;
        let coherence = mutual_coherence(&beams);
        Ok(Codebook {
            num_antennas,
            beams,
            steering_angles: angles_deg.to_vec(),
            coherence,
        })
    }

    /// `n` beams on `n` antennas, equally spaced in spatial frequency.
    pub fn orthogonal(n: usize) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(HbfError::InvalidArgument(format!(
                "orthogonal codebook size must be even and >= 2, got {n}"
            )));
        }
        Self::from_angles(&sine_grid_angles(n), n)
    }

    /// `n` beams on the sine grid of size `n`, for an array of
    /// `num_antennas < n` elements.
    pub fn weakly_coherent(n: usize, num_antennas: usize) -> Result<Self> {
        if n <= num_antennas {
            return Err(HbfError::InvalidArgument(format!(
                "weakly coherent codebook needs more beams than antennas, got {n} beams for {num_antennas} antennas"
            )));
        }
        Self::from_angles(&sine_grid_angles(n), num_antennas)
    }

    /// `n` beams uniformly spaced in angle, `−90° + 180°·n_f/n`, `n_f = 1..=n`.
    pub fn strongly_coherent(n: usize, num_antennas: usize) -> Result<Self> {
        if n < 2 {
            return Err(HbfError::InvalidArgument(format!(
                "strongly coherent codebook needs at least 2 beams, got {n}"
            )));
        }
        let angles: Vec<f64> = (1..=n)
            .map(|nf| -90.0 + 180.0 * nf as f64 / n as f64)
            .collect();
        Self::from_angles(&angles, num_antennas)
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    pub fn num_beams(&self) -> usize {
        self.beams.cols()
    }

    /// `num_antennas × num_beams`, one steering vector per column.
    pub fn beams(&self) -> &ComplexMatrix {
        &self.beams
    }

    pub fn steering_angles(&self) -> &[f64] {
        &self.steering_angles
    }

    pub fn coherence(&self) -> f64 {
        self.coherence
    }

    pub fn beam(&self, index: usize) -> Result<DVector<C64>> {
        if index >= self.num_beams() {
            return Err(HbfError::IndexOutOfRange {
                what: "codebook beam",
                index,
                len: self.num_beams(),
            });
        }
        Ok(self.beams.column(index).into_owned())
    }

    /// Columns `indices` as an analog beamforming matrix.
    pub fn submatrix(&self, indices: &[usize]) -> Result<ComplexMatrix> {
        self.beams.select_columns(indices)
    }

    /// Gram matrix `B^H B` of the selected columns.
    pub fn gram(&self, indices: &[usize]) -> Result<ComplexMatrix> {
        let sub = self.submatrix(indices)?;
        Ok(&sub.adjoint() * &sub)
    }

    /// One row per beam: `index,angle_deg,re_0,im_0,re_1,im_1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,angle_deg");
        for n in 0..self.num_antennas {
            let _ = write!(out, ",re_{n},im_{n}");
        }
        out.push('\n');
        for (b, angle) in self.steering_angles.iter().enumerate() {
            let _ = write!(out, "{b},{angle}");
            for z in self.beams.column(b).iter() {
                let _ = write!(out, ",{},{}", z.re, z.im);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| HbfError::io(path, e))
    }
}

/// Largest `|⟨b_i, b_j⟩|/(‖b_i‖‖b_j‖)` over distinct column pairs; 0 for a
/// single column.
pub fn mutual_coherence(beams: &DMatrix<C64>) -> f64 {
    let norms: Vec<f64> = beams.column_iter().map(|c| c.norm()).collect();
    let mut worst = 0.0_f64;
    for i in 0..beams.ncols() {
        for j in (i + 1)..beams.ncols() {
            let ip = beams.column(i).dotc(&beams.column(j)).norm();
            worst = worst.max(ip / (norms[i] * norms[j]));
        }
    }
    worst
}
