//! Exhaustive beam-pair training.
//!
//! Every receive beam `w̃` is paired with every transmit beam `f̃`, and the
//! correlated pilot on subcarrier `k` gives `y = w̃^H H[k] f̃ + z`. The unit
//! modulus pilot cancels in the correlation, so it is never materialized.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{subcarrier_phase, ChannelRealization};
use crate::codebook::Codebook;
use crate::error::{HbfError, Result};
use crate::matkernel::C64;

/// Coupling coefficients `y[n_w][n_f][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingTensor {
    n_w: usize,
    n_f: usize,
    subcarriers: usize,
    /// Flat storage, `((n_w·N_F) + n_f)·K + k`.
    data: Vec<C64>,
    noise_variance: f64,
    noise_free: bool,
}

impl CouplingTensor {
    pub fn zeros(n_w: usize, n_f: usize, subcarriers: usize) -> Self {
        CouplingTensor {
            n_w,
            n_f,
            subcarriers,
            data: vec![C64::new(0.0, 0.0); n_w * n_f * subcarriers],
            noise_variance: 0.0,
            noise_free: true,
        }
    }

    /// Builds a tensor from a closure over `(n_w, n_f, k)`.
    pub fn from_fn(
        n_w: usize,
        n_f: usize,
        subcarriers: usize,
        mut f: impl FnMut(usize, usize, usize) -> C64,
    ) -> Self {
        let mut t = Self::zeros(n_w, n_f, subcarriers);
        for w in 0..n_w {
            for fi in 0..n_f {
                for k in 0..subcarriers {
                    t.data[(w * n_f + fi) * subcarriers + k] = f(w, fi, k);
                }
            }
        }
        t
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn is_noise_free(&self) -> bool {
        self.noise_free
    }

    #[inline]
    pub fn get(&self, n_w: usize, n_f: usize, k: usize) -> C64 {
        self.data[(n_w * self.n_f + n_f) * self.subcarriers + k]
    }

    /// All subcarriers of one beam pair.
    #[inline]
    pub fn pair(&self, n_w: usize, n_f: usize) -> &[C64] {
        let start = (n_w * self.n_f + n_f) * self.subcarriers;
        &self.data[start..start + self.subcarriers]
    }

    fn check_pair(&self, n_w: usize, n_f: usize) -> Result<()> {
        if n_w >= self.n_w {
            return Err(HbfError::IndexOutOfRange {
                what: "receive beam",
                index: n_w,
                len: self.n_w,
            });
        }
        if n_f >= self.n_f {
            return Err(HbfError::IndexOutOfRange {
                what: "transmit beam",
                index: n_f,
                len: self.n_f,
            });
        }
        Ok(())
    }

    /// `Σ_k |y[n_w][n_f][k]|²`.
    pub fn pair_energy(&self, n_w: usize, n_f: usize) -> Result<f64> {
        self.check_pair(n_w, n_f)?;
        Ok(self.pair(n_w, n_f).iter().map(|z| z.norm_sqr()).sum())
    }

    /// Pair energies as an `N_W × N_F` row-major table.
    pub fn energy_table(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.subcarriers)
            .map(|c| c.iter().map(|z| z.norm_sqr()).sum())
            .collect()
    }

    /// `Y[k]` gathered on the `rx × tx` index grid.
    pub fn gather(&self, rx: &[usize], tx: &[usize], k: usize) -> DMatrix<C64> {
        DMatrix::from_fn(rx.len(), tx.len(), |r, c| self.get(rx[r], tx[c], k))
    }

    /// `self + √σ²·noise`, with `noise` holding unit-variance draws.
    pub fn with_scaled_noise(&self, noise: &CouplingTensor, sigma2: f64) -> Result<Self> {
        if (noise.n_w, noise.n_f, noise.subcarriers) != (self.n_w, self.n_f, self.subcarriers) {
            return Err(HbfError::DimensionMismatch {
                op: "add training noise",
                detail: format!(
                    "{}x{}x{} vs {}x{}x{}",
                    self.n_w, self.n_f, self.subcarriers, noise.n_w, noise.n_f, noise.subcarriers
                ),
            });
        }
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(HbfError::InvalidArgument(format!(
                "noise variance {sigma2} must be finite and non-negative"
            )));
        }
        let s = sigma2.sqrt();
        let data = self
            .data
            .iter()
            .zip(&noise.data)
            .map(|(y, z)| y + z * s)
            .collect();
        Ok(CouplingTensor {
            data,
            noise_variance: sigma2,
            noise_free: sigma2 == 0.0,
            ..*self
        })
    }

    /// CSV with one row per entry, `n_w,n_f,k,re,im`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_w,n_f,k,re,im\n");
        for w in 0..self.n_w {
            for f in 0..self.n_f {
                for (k, z) in self.pair(w, f).iter().enumerate() {
                    let _ = writeln!(out, "{w},{f},{k},{},{}", z.re, z.im);
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| HbfError::io(path, e))
    }
}

fn check_dims(chan: &ChannelRealization, tx_cb: &Codebook, rx_cb: &Codebook) -> Result<()> {
    if tx_cb.num_antennas() != chan.n_t() || rx_cb.num_antennas() != chan.n_r() {
        return Err(HbfError::DimensionMismatch {
            op: "training",
            detail: format!(
                "codebooks for {}x{} antennas, channel is {}x{}",
                rx_cb.num_antennas(),
                tx_cb.num_antennas(),
                chan.n_r(),
                chan.n_t()
            ),
        });
    }
    Ok(())
}

/// `w̃^H H[k] f̃` for every beam pair and subcarrier.
///
/// Each delay tap is projected once as `W^H T_l F`; subcarriers are then
/// phase-weighted sums of the projected taps.
pub fn noise_free_couplings(
    chan: &ChannelRealization,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
) -> Result<CouplingTensor> {
    check_dims(chan, tx_cb, rx_cb)?;
    let w_h = rx_cb.beams().adjoint();
    let f = tx_cb.beams().as_dmatrix();
    let projected: Vec<(usize, DMatrix<C64>)> = chan
        .taps()
        .iter()
        .map(|(delay, tap)| (*delay, w_h.as_dmatrix() * tap.as_dmatrix() * f))
        .collect();

    let (n_w, n_f, kk) = (rx_cb.num_beams(), tx_cb.num_beams(), chan.subcarriers());
    let mut out = CouplingTensor::zeros(n_w, n_f, kk);
    for k in 0..kk {
        for (delay, p) in &projected {
            let ph = subcarrier_phase(k, *delay, kk);
            for w in 0..n_w {
                for fi in 0..n_f {
                    out.data[(w * n_f + fi) * kk + k] += p[(w, fi)] * ph;
                }
            }
        }
    }
    Ok(out)
}

/// Unit-variance CSCG draws for every `(n_w, n_f, k)`.
///
/// Subcarrier `k` uses its own ChaCha stream (`seed`, stream `k`) and fills
/// pairs in `(n_w, n_f)` order, so the result does not depend on how the
/// work is scheduled.
pub fn unit_noise(n_w: usize, n_f: usize, subcarriers: usize, seed: u64) -> CouplingTensor {
    let mut out = CouplingTensor::zeros(n_w, n_f, subcarriers);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    for k in 0..subcarriers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for w in 0..n_w {
            for fi in 0..n_f {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                out.data[(w * n_f + fi) * subcarriers + k] = C64::new(re * scale, im * scale);
            }
        }
    }
    out.noise_free = false;
    out.noise_variance = 1.0;
    out
}

/// Coupling tensor of one full training sweep with noise variance `sigma2`.
pub fn simulate_training(
    chan: &ChannelRealization,
    tx_cb: &Codebook,
    rx_cb: &Codebook,
    sigma2: f64,
    noise_free: bool,
    seed: u64,
) -> Result<CouplingTensor> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(HbfError::InvalidArgument(format!(
            "noise variance {sigma2} must be finite and non-negative"
        )));
    }
    let clean = noise_free_couplings(chan, tx_cb, rx_cb)?;
    if noise_free || sigma2 == 0.0 {
        return Ok(clean);
    }
    let noise = unit_noise(clean.n_w, clean.n_f, clean.subcarriers, seed);
    clean.with_scaled_noise(&noise, sigma2)
}
