//! Post-hoc probability calibration for ranking models.
//!
//! The centerpiece is a feature-conditional monotonic calibrator: a strictly
//! positive derivative network integrated with a fixed Clenshaw–Curtis rule,
//! followed by a feature-dependent rescaling head. Training combines binary
//! cross entropy with a smooth calibration loss over EMA-smoothed per-group
//! statistics. Classical univariate baselines (histogram binning, isotonic
//! regression, smoothed isotonic regression, Platt scaling), a full
//! calibration/ranking metric suite, and a synthetic-log generator with known
//! ground-truth probabilities round out the toolkit.

pub mod baselines;
pub mod calibrator;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quadrature;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
