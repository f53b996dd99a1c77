//! Grid-based nonlinear filtering for scalar hidden Markov models, viewed as
//! normalized products of nonnegative kernels driven by the observation path,
//! with tools to measure and bound how fast filters forget their
//! initialization in weighted total variation (V-norm).

pub mod assumptions;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod gaussian;
mod linalg;
pub mod measure;
pub mod models;
pub mod quad;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits, enough to round-trip.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}
