//! Imputation and entrywise inference for low-rank panels with staggered adoption.
//!
//! The library reduces every missing block of a staggered panel to a four-block
//! problem, fills it with a spectral estimator, and attaches plug-in variances,
//! confidence intervals and theoretical benchmarks to each imputed entry.

pub mod denoise;
pub mod ensembles;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod panel;

pub use error::{Error, Result};
pub use linalg::SvdFactors;
