//! Imputation of hourly temperature series at stations reporting only daily
//! minima and maxima.
//!
//! The pipeline: fit a spatiotemporal Gaussian process to nearby stations
//! with hourly records ([`gp`]), condition it on those records to get a
//! multivariate-normal prior at the target station, then draw posterior
//! imputations that honor each day's observed min/max with the
//! softmax-smoothed Hamiltonian Monte Carlo sampler ([`smoothhmc`]).
//! [`toy_oracle`] provides the analytic ground truth used to validate the
//! sampler, and [`diagnostics`] the variogram/error/summary machinery plus
//! measurement-hour inference.

pub mod diagnostics;
pub mod error;
pub mod geom_time;
pub mod gp;
pub mod io;
pub mod kernels;
pub(crate) mod linalg;
pub mod smoothhmc;
pub mod synth;
pub mod toy_oracle;

pub use error::{Error, Result};
