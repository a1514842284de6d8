//! Bilinear decorrelation of matrix-valued time series.
//!
//! The crate estimates a pair of orthogonal transforms that map a `p x q`
//! matrix series onto a latent series whose row and column blocks are
//! mutually uncorrelated at every lag, recovers those blocks from sample
//! cross-correlations, and forecasts by fitting small models per block.

pub mod error;
pub mod estimation;
pub mod forecasting;
pub mod matcore;
pub mod segmentation;
pub mod simgen;
pub mod transform;

pub use error::{Error, ErrorKind, Result};
pub use estimation::{EigTransform, Mode, WEstimate};
pub use matcore::{MatrixSeries, SymEig};
