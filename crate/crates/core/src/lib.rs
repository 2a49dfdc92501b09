//! Hybrid analog/digital beamforming for mmWave MIMO-OFDM links.
//!
//! Analog beams are chosen from coupling coefficients measured during an
//! exhaustive beam-pair sweep, without ever estimating the full channel.
//! The crate also carries an OMP baseline that does use the full channel,
//! noise statistics for the estimated effective channel, and a Monte Carlo
//! sweep driver.

pub mod beamcore;
pub mod channel;
pub mod codebook;
pub mod error;
pub mod harness;
pub mod matkernel;
pub mod metrics;
pub mod reference;
pub mod training;

pub use error::{HbfError, Result};
pub use matkernel::{ComplexMatrix, C64};
