//! Closed-form Kalman recursion for the scalar linear model and exact
//! V-moments of Gaussian laws.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::measure::{WeightFamily, WeightSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: f64,
    pub var: f64,
}

impl GaussianState {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
            return Err(Error::Domain(format!("invalid Gaussian state N({mean}, {var})")));
        }
        Ok(Self { mean, var })
    }
}

/// Stationary law `N(0, 1/(1 - alpha^2))` of `X_{k+1} = alpha X_k + V_k`.
pub fn stationary_pi(alpha: f64) -> Result<GaussianState> {
    if !(alpha.abs() < 1.0) {
        return Err(Error::Domain(format!("stationary law needs |alpha| < 1, got {alpha}")));
    }
    GaussianState::new(0.0, 1.0 / (1.0 - alpha * alpha))
}

/// Moves `s` through the signal: `N(alpha m, alpha^2 v + 1)`.
pub fn kalman_predict(s: GaussianState, alpha: f64) -> GaussianState {
    GaussianState { mean: alpha * s.mean, var: alpha * alpha * s.var + 1.0 }
}

/// Conditions a predictive law on `y = x + beta_obs W`. Returns the posterior
/// and `log N(y; m, v + beta_obs^2)`.
pub fn kalman_update(pred: GaussianState, y: f64, beta_obs: f64) -> (GaussianState, f64) {
    let r = beta_obs * beta_obs;
    let s = pred.var + r;
    let mean = (pred.var * y + r * pred.mean) / s;
    let var = pred.var * r / s;
    let innov = y - pred.mean;
    let loglik = -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + innov * innov / s);
    (GaussianState { mean, var }, loglik)
}

/// One predict/update cycle.
pub fn kalman_step(prior: GaussianState, y: f64, alpha: f64, beta_obs: f64) -> (GaussianState, f64) {
    kalman_update(kalman_predict(prior, alpha), y, beta_obs)
}

/// `E V(Z)` for `Z ~ N(mean, var)`; `+inf` when the integral diverges.
pub fn gaussian_v_moment(s: GaussianState, v: &WeightSpec) -> f64 {
    let c = v.c;
    match v.family {
        WeightFamily::ExpAbs => {
            let sd = s.var.sqrt();
            let mu = s.mean;
            // Phi(t) = erfc(-t / sqrt 2) / 2; the exponentials are folded in so that
            // large c*sd or |mu| do not overflow prematurely.
            let term = |m: f64| -> f64 {
                let t = m / sd + c * sd;
                let ln_phi = (0.5 * erfc(-t / std::f64::consts::SQRT_2)).ln();
                (0.5 * c * c * s.var + c * m + ln_phi).exp()
            };
            term(mu) + term(-mu)
        }
        WeightFamily::ExpSquare => {
            let a = 1.0 - c * s.var;
            if a <= 0.0 {
                f64::INFINITY
            } else {
                (c * s.mean * s.mean / (2.0 * a)).exp() / a.sqrt()
            }
        }
    }
}
