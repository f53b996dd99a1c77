//! Checks and constants for the stability theory: local Doeblin (LD)
//! constants of intervals, drift functions `W` and their sublevel sets `C_d`,
//! per-step environment statistics along a path, and the constants
//! `(gamma-, gamma+, beta, d, rho)` of the forgetting theorem.
//!
//! Everything that can under- or overflow is carried as a logarithm.

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::measure::{Grid, GridMeasure, WeightFamily, WeightSpec};
use crate::models::{
    ln_obs_density, ln_transition_density, DriftFn, ModelKind, ModelSpec, ObsFn, ObservationPath, Scenario,
};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Domain(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(r: f64) -> Result<Self> {
        Self::new(-r, r)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Distance from `y` to the interval (0 inside).
    pub fn distance(&self, y: f64) -> f64 {
        (self.lo - y).max(y - self.hi).max(0.0)
    }

    /// Largest distance from `y` to a point of the interval.
    pub fn farthest(&self, y: f64) -> f64 {
        (y - self.lo).abs().max((self.hi - y).abs())
    }
}

/// Image of `[lo, hi]` under `t -> sin t`.
fn sin_range(u: f64, v: f64) -> (f64, f64) {
    let (u, v) = if u <= v { (u, v) } else { (v, u) };
    if v - u >= 2.0 * std::f64::consts::PI {
        return (-1.0, 1.0);
    }
    let (mut lo, mut hi) = (u.sin().min(v.sin()), u.sin().max(v.sin()));
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut k = ((u - half_pi) / std::f64::consts::PI).ceil();
    loop {
        let t = half_pi + k * std::f64::consts::PI;
        if t > v {
            break;
        }
        let s = t.sin();
        lo = lo.min(s);
        hi = hi.max(s);
        k += 1.0;
    }
    (lo, hi)
}

/// Enclosure of the image of `[lo, hi]` under `f` from dense samples, widened
/// by `lip * spacing / 2`.
fn sampled_image(lo: f64, hi: f64, lip: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    const SAMPLES: usize = 4001;
    let step = (hi - lo) / (SAMPLES - 1) as f64;
    let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..SAMPLES {
        let v = f(if i + 1 == SAMPLES { hi } else { lo + i as f64 * step });
        a = a.min(v);
        b = b.max(v);
    }
    let margin = 0.5 * lip * step;
    (a - margin, b + margin)
}

/// Enclosure of `m(C)` for the signal mean `m`.
fn mean_image(model: &ModelSpec, c: &Interval) -> Interval {
    let (a, b) = match model.kind {
        ModelKind::Linear { alpha } => {
            let (u, v) = (alpha * c.lo, alpha * c.hi);
            (u.min(v), u.max(v))
        }
        ModelKind::Nonlinear { drift: DriftFn::Linear { k }, .. } => {
            let (u, v) = ((1.0 + k) * c.lo, (1.0 + k) * c.hi);
            (u.min(v), u.max(v))
        }
        ModelKind::Nonlinear { drift: DriftFn::LinearSine { k, amplitude, frequency }, .. } => {
            let lip = (1.0 + k).abs() + (amplitude * frequency).abs();
            sampled_image(c.lo, c.hi, lip, |x| model.signal_mean(x))
        }
    };
    Interval { lo: a, hi: b }
}

/// Exact image `h(C)`.
fn obs_image(model: &ModelSpec, c: &Interval) -> Interval {
    let endpoints = |u: f64, v: f64| Interval { lo: u.min(v), hi: u.max(v) };
    match model.kind {
        ModelKind::Linear { .. } => endpoints(c.lo, c.hi),
        ModelKind::Nonlinear { obs, .. } => match obs {
            ObsFn::Linear { .. } | ObsFn::Exponential { .. } => endpoints(obs.eval(c.lo), obs.eval(c.hi)),
            ObsFn::Constant { value } => Interval { lo: value, hi: value },
            ObsFn::Sine { amplitude, frequency } => {
                let (s, t) = sin_range(frequency * c.lo, frequency * c.hi);
                endpoints(amplitude * s, amplitude * t)
            }
        },
    }
}

/// `(ln inf, ln sup)` of `f(x, x')` over `x, x'` in `c`.
fn ln_f_extremes(model: &ModelSpec, c: &Interval) -> (f64, f64) {
    let m = mean_image(model, c);
    let far = (c.hi - m.lo).abs().max((m.hi - c.lo).abs());
    let near = (m.lo - c.hi).max(c.lo - m.hi).max(0.0);
    let s = model.sigma();
    let ln_density = |dist: f64| -0.5 * (dist / s).powi(2) - LN_SQRT_2PI - s.ln();
    (ln_density(far), ln_density(near))
}

/// `(ln inf, ln sup)` of `g(x, y)` over `x` in `c`.
fn ln_g_extremes(model: &ModelSpec, c: &Interval, y: f64) -> (f64, f64) {
    let h = obs_image(model, c);
    let b = model.beta_obs;
    let top = model.ln_sup_obs_density();
    (top - 0.5 * (h.farthest(y) / b).powi(2), top - 0.5 * (h.distance(y) / b).powi(2))
}

/// LD constants of an interval `C` for the kernel family indexed by
/// observations in `ybar`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LDReport {
    #[serde(rename = "C")]
    pub c: Interval,
    pub ybar: Interval,
    pub eps_minus_tilde: f64,
    pub eps_plus_tilde: f64,
    pub ln_eps_minus_tilde: f64,
    pub ln_eps_plus_tilde: f64,
    /// `inf_{y in ybar} ln(eps-(y) / eps+(y))`
    pub ln_ratio: f64,
    #[serde(rename = "rho_Cd")]
    pub rho_cd: f64,
    #[serde(skip)]
    model: Option<ModelSpec>,
}

impl LDReport {
    fn model(&self) -> &ModelSpec {
        self.model.as_ref().expect("report built by ld_constants")
    }

    pub fn ln_eps_minus(&self, y: f64) -> f64 {
        self.ln_eps_minus_tilde + ln_g_extremes(self.model(), &self.c, y).0
    }

    pub fn ln_eps_plus(&self, y: f64) -> f64 {
        self.ln_eps_plus_tilde + ln_g_extremes(self.model(), &self.c, y).1
    }

    /// `eps-(y) = eps~- inf_{x in C} g(x, y)`
    pub fn eps_minus(&self, y: f64) -> f64 {
        self.ln_eps_minus(y).exp()
    }

    /// `eps+(y) = eps~+ sup_{x in C} g(x, y)`
    pub fn eps_plus(&self, y: f64) -> f64 {
        self.ln_eps_plus(y).exp()
    }

    /// Normalized counting measure on the grid nodes inside `C`.
    pub fn mu_c(&self, grid: &Grid) -> Result<GridMeasure> {
        let range = grid.indices_within(self.c.lo, self.c.hi);
        if range.is_empty() {
            return Err(Error::Domain("no grid node inside C".into()));
        }
        let mut w = vec![0.0; grid.len()];
        let share = 1.0 / range.len() as f64;
        for i in range {
            w[i] = share;
        }
        GridMeasure::new(grid.clone(), w)
    }
}

/// `1 - exp(2 ln_ratio)` without losing digits when the ratio is tiny.
pub fn rho_from_ln_ratio(ln_ratio: f64) -> f64 {
    -(2.0 * ln_ratio).exp_m1()
}

/// LD constants of `C = [-r, r]`.
pub fn ld_constants(model: &ModelSpec, r: f64, ybar: &Interval) -> Result<LDReport> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("LD radius must be positive, got {r}")));
    }
    ld_constants_on(model, &Interval::symmetric(r)?, ybar)
}

/// LD constants of an arbitrary interval `C` of positive width.
pub fn ld_constants_on(model: &ModelSpec, c: &Interval, ybar: &Interval) -> Result<LDReport> {
    if !(c.width() > 0.0) {
        return Err(Error::Domain("C must have positive width".into()));
    }
    let (ln_fmin, ln_fmax) = ln_f_extremes(model, c);
    let ln_w = c.width().ln();
    let (ln_em, ln_ep) = (ln_fmin + ln_w, ln_fmax + ln_w);
    // ln(eps-/eps+)(y) = ln(eps~-/eps~+) - (far(y)^2 - near(y)^2) / (2 beta^2); the
    // subtracted term is convex in y, so its maximum over ybar sits at an endpoint.
    let h = obs_image(model, c);
    let spread = |y: f64| (h.farthest(y).powi(2) - h.distance(y).powi(2)) / (2.0 * model.beta_obs.powi(2));
    let ln_ratio = (ln_em - ln_ep) - spread(ybar.lo).max(spread(ybar.hi));
    Ok(LDReport {
        c: *c,
        ybar: *ybar,
        eps_minus_tilde: ln_em.exp(),
        eps_plus_tilde: ln_ep.exp(),
        ln_eps_minus_tilde: ln_em,
        ln_eps_plus_tilde: ln_ep,
        ln_ratio,
        rho_cd: rho_from_ln_ratio(ln_ratio),
        model: Some(*model),
    })
}

/// `kappa = 1 + c / alpha^2 - 1 / (2 - c)` (unit observation noise).
pub fn kappa(alpha: f64, c: f64) -> f64 {
    kappa_general(alpha, c, 1.0)
}

/// `kappa` for observation noise `beta_obs`: `1 + c / alpha^2 - 1 / a`
/// with `a = 1 + 1 / beta_obs^2 - c`.
pub fn kappa_general(alpha: f64, c: f64, beta_obs: f64) -> f64 {
    let a = 1.0 + 1.0 / (beta_obs * beta_obs) - c;
    1.0 + c / (alpha * alpha) - 1.0 / a
}

/// Range of `c` with `a > 0` and `kappa > 0` for the given `alpha`, `beta_obs`.
pub fn admissible_c_range(alpha: f64, beta_obs: f64) -> (f64, f64) {
    // kappa > 0  <=>  (1 + c/alpha^2) a > 1 with a = p - c, p = 1 + 1/beta^2.
    // That is the quadratic  -c^2/alpha^2 + c (p/alpha^2 - 1) + p - 1 > 0.
    let p = 1.0 + 1.0 / (beta_obs * beta_obs);
    let a2 = alpha * alpha;
    let (qa, qb, qc) = (-1.0 / a2, p / a2 - 1.0, p - 1.0);
    let disc = (qb * qb - 4.0 * qa * qc).sqrt();
    let r1 = (-qb + disc) / (2.0 * qa);
    let r2 = (-qb - disc) / (2.0 * qa);
    let hi = r1.max(r2).min(p);
    (0.0, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
enum DriftForm {
    /// `psi(x) = c(|m(x)| - |x|) + ln M + ln sup g`
    ExpAbs { c: f64, ln_m: f64 },
    /// Exact `ln Q^y(V)(x) / V(x)` for the linear model with `V = exp(c x^2 / 2)`.
    ExpSquare { alpha: f64, c: f64, a: f64, kappa: f64 },
}

/// Drift function `W = 0 v -sup_{y in ybar} psi(., y)` with its sublevel sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftProfile {
    pub model: ModelSpec,
    pub weight: WeightSpec,
    #[serde(rename = "K_set")]
    pub ybar: Interval,
    pub d_under: f64,
    #[serde(rename = "D")]
    pub d_set: Interval,
    /// `M` of the exponential-moment bound (exp-abs weights only).
    #[serde(rename = "M_const")]
    pub m_const: Option<f64>,
    pub kappa: Option<f64>,
    form: DriftForm,
}

/// Candidate `d` levels are scanned on `[-SCAN_LIMIT, SCAN_LIMIT]`.
const SCAN_LIMIT: f64 = 1e3;
const SCAN_STEP: f64 = 1e-3;

impl DriftProfile {
    /// `psi(x, y)`; an upper bound on `ln Q^y(V)(x) / V(x)` (exact for the
    /// square-exponential form).
    pub fn psi(&self, x: f64, y: f64) -> f64 {
        match self.form {
            DriftForm::ExpAbs { c, ln_m } => {
                c * (self.model.signal_mean(x).abs() - x.abs()) + ln_m + self.model.ln_sup_obs_density()
            }
            DriftForm::ExpSquare { alpha, c, a, .. } => {
                let b = self.model.beta_obs;
                let b2 = b * b;
                let lin = alpha * x + y / b2;
                -LN_SQRT_2PI - b.ln() - 0.5 * a.ln() + lin * lin / (2.0 * a)
                    - 0.5 * alpha * alpha * x * x
                    - y * y / (2.0 * b2)
                    - 0.5 * c * x * x
            }
        }
    }

    /// `sup_{y in ybar} psi(x, y)`.
    pub fn psi_sup(&self, x: f64) -> f64 {
        match self.form {
            DriftForm::ExpAbs { .. } => self.psi(x, 0.0),
            DriftForm::ExpSquare { alpha, a, .. } => {
                let b2 = self.model.beta_obs.powi(2);
                let mut best = self.psi(x, self.ybar.lo).max(self.psi(x, self.ybar.hi));
                // Coefficient of y^2 is (1/(a b^2) - 1) / (2 b^2); when negative the
                // quadratic peaks at its vertex.
                let quad = 1.0 / (a * b2) - 1.0;
                if quad < 0.0 {
                    let vertex = -(alpha * x / (a * b2)) / quad;
                    if self.ybar.contains(vertex) {
                        best = best.max(self.psi(x, vertex));
                    }
                }
                best
            }
        }
    }

    pub fn w(&self, x: f64) -> f64 {
        (-self.psi_sup(x)).max(0.0)
    }

    /// Smallest interval containing `{x : W(x) <= d}`.
    pub fn c_of(&self, d: f64) -> Result<Interval> {
        let steps = (SCAN_LIMIT / SCAN_STEP) as i64;
        let at = |i: i64| i as f64 * SCAN_STEP;
        let first = (-steps..=steps).find(|&i| self.w(at(i)) <= d);
        let last = (-steps..=steps).rev().find(|&i| self.w(at(i)) <= d);
        let (Some(first), Some(last)) = (first, last) else {
            return Err(Error::Domain(format!("sublevel set of W at d = {d} is empty on the scan range")));
        };
        if first == -steps || last == steps {
            return Err(Error::Domain(format!("sublevel set of W at d = {d} reaches the scan limit")));
        }
        let lo = self.bisect(at(first - 1), at(first), d);
        let hi = self.bisect(at(last + 1), at(last), d);
        Interval::new(lo, hi)
    }

    /// Boundary between `outside` (W > d) and `inside` (W <= d); returns a
    /// point on the outside so the interval stays a superset.
    fn bisect(&self, mut outside: f64, mut inside: f64, d: f64) -> f64 {
        for _ in 0..60 {
            let mid = 0.5 * (outside + inside);
            if self.w(mid) <= d {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        outside
    }

    /// `ln V_d = ln sup_{C_d} V`.
    pub fn ln_v_of(&self, d: f64) -> Result<f64> {
        let c = self.c_of(d)?;
        Ok(self.weight.ln_eval(c.lo).max(self.weight.ln_eval(c.hi)))
    }

    pub fn v_of(&self, d: f64) -> Result<f64> {
        Ok(self.ln_v_of(d)?.exp())
    }

    /// Whether this profile bounds the drift of `scenario`'s kernel.
    pub fn supports(&self, scenario: Scenario) -> bool {
        match self.form {
            DriftForm::ExpAbs { .. } => true,
            DriftForm::ExpSquare { .. } => scenario == Scenario::Filter,
        }
    }
}

/// Drift profile of `model` under weight `v` for observations in `ybar`.
///
/// Exp-abs weights work for every model and both scenarios. The
/// square-exponential weight is supported for the linear model in the filter
/// scenario and requires `kappa > 0`.
pub fn drift_profile(model: &ModelSpec, v: &WeightSpec, ybar: &Interval) -> Result<DriftProfile> {
    let c = v.c;
    let (form, m_const, kap) = match (v.family, model.kind) {
        (WeightFamily::ExpAbs, _) => {
            let s = model.sigma();
            let ln_m = std::f64::consts::LN_2 + 0.5 * c * c * s * s;
            (DriftForm::ExpAbs { c, ln_m }, Some(ln_m.exp()), None)
        }
        (WeightFamily::ExpSquare, ModelKind::Linear { alpha }) => {
            let b = model.beta_obs;
            let a = 1.0 + 1.0 / (b * b) - c;
            let kap = kappa_general(alpha, c, b);
            if !(a > 0.0 && kap > 0.0) {
                let (c_lo, c_hi) = admissible_c_range(alpha, b);
                return Err(Error::KappaNonpositive { kappa: kap, alpha, c, c_lo, c_hi });
            }
            (DriftForm::ExpSquare { alpha, c, a, kappa: kap }, None, Some(kap))
        }
        (WeightFamily::ExpSquare, ModelKind::Nonlinear { .. }) => {
            return Err(Error::Unsupported(
                "square-exponential weights are only available for the linear model".into(),
            ))
        }
    };
    let mut profile = DriftProfile {
        model: *model,
        weight: *v,
        ybar: *ybar,
        d_under: 0.0,
        d_set: Interval { lo: -1.0, hi: 1.0 },
        m_const,
        kappa: kap,
        form,
    };
    const UNIT_SAMPLES: usize = 20_001;
    profile.d_under = (0..UNIT_SAMPLES)
        .map(|i| -1.0 + 2.0 * i as f64 / (UNIT_SAMPLES - 1) as f64)
        .map(|x| profile.w(x))
        .fold(0.0, f64::max);
    profile.d_set = profile.c_of(profile.d_under)?;
    Ok(profile)
}

/// Per-step environment statistics along a path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvStats {
    /// `ln` of window-Upsilon: `max_i Q(V)(x_i) / V(x_i)` over grid nodes.
    pub ln_upsilon: Vec<f64>,
    /// `ln min_{x_i in D} Q(x_i, D)`.
    pub ln_psi: Vec<f64>,
    /// `ln Z = ln(1 v Upsilon) - ln(1 ^ Psi)`
    pub ln_z: Vec<f64>,
    pub in_k: Vec<bool>,
    /// `ln T_d` for the level used in [`env_stats`].
    pub ln_t_d: Vec<f64>,
    pub d: f64,
    pub l_hat: f64,
    pub gamma_hat: f64,
    /// `xi_n = n^-1 sum_{k<n} ln Z_k - l_hat` for `n = 1..`
    pub xi: Vec<f64>,
    /// `xi~_n = n^-1 I_{0,n-1} - gamma_hat` for `n = 1..`
    pub xi_tilde: Vec<f64>,
}

impl EnvStats {
    pub fn z(&self, k: usize) -> f64 {
        self.ln_z[k].exp()
    }

    /// `I_{p,q} = sum_{i=p}^{q} 1_K(i)` (0 when `p > q`).
    pub fn i_count(&self, p: usize, q: usize) -> usize {
        if p > q {
            return 0;
        }
        self.in_k[p..=q].iter().filter(|&&b| b).count()
    }
}

/// `ln sum_j exp(ln_a_ij + ln_u_j)` for rows `rows` and columns `cols`, where
/// `a` is a stored nonnegative matrix with analytic logarithm `ln_a`. A scaled
/// product handles the bulk; rows whose result is too small to trust are
/// redone in log space.
fn ln_row_sums(
    a: &[f64],
    ncols: usize,
    ln_a: impl Fn(usize, usize) -> f64 + Sync,
    ln_u: &[f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Vec<f64> {
    use rayon::prelude::*;
    let s = cols.clone().map(|j| ln_u[j]).fold(f64::NEG_INFINITY, f64::max);
    if s == f64::NEG_INFINITY {
        return vec![f64::NEG_INFINITY; rows.len()];
    }
    let u: Vec<f64> = cols.clone().map(|j| (ln_u[j] - s).exp()).collect();
    rows.into_par_iter()
        .map(|i| {
            let row = &a[i * ncols + cols.start..i * ncols + cols.end];
            let dot = {
                let _ftz = crate::linalg::FlushDenormals::new();
                crate::linalg::dot(row, &u)
            };
            if dot > 1e-250 {
                return dot.ln() + s;
            }
            let terms = cols.clone().map(|j| ln_a(i, j) + ln_u[j]);
            let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Which observation the indicator `1_K(k)` inspects.
fn k_obs(scenario: Scenario, path: &ObservationPath, k: usize) -> Result<f64> {
    let idx = scenario.obs_index(k);
    path.y.get(idx).copied().ok_or(Error::PathTooShort { needed: idx + 1, have: path.len() })
}

/// Environment statistics for steps `0..n` of `engine` along `path`, with
/// `T_d` evaluated at level `d`.
///
/// Upsilon and Psi are computed on the grid, so the resulting bounds are
/// statements about the grid system itself.
pub fn env_stats(
    engine: &Engine,
    path: &ObservationPath,
    n: usize,
    profile: &DriftProfile,
    d: f64,
) -> Result<EnvStats> {
    let mut stats = env_stats_without_t(engine, path, n, profile)?;
    stats.ln_t_d = ln_t_d_series(engine, path, n, profile, d)?;
    stats.d = d;
    Ok(stats)
}

pub(crate) fn env_stats_without_t(
    engine: &Engine,
    path: &ObservationPath,
    n: usize,
    profile: &DriftProfile,
) -> Result<EnvStats> {
    if n == 0 {
        return Err(Error::Domain("environment statistics need n >= 1".into()));
    }
    let scenario = engine.scenario();
    if !profile.supports(scenario) {
        return Err(Error::Unsupported(format!("drift profile does not cover the {scenario} scenario")));
    }
    let model = *engine.model();
    let grid = engine.grid();
    let nodes = grid.nodes();
    let widths = grid.widths();
    let size = grid.len();
    let f = engine.transition().kernel().density();
    let ln_f = |i: usize, j: usize| ln_transition_density(&model, nodes[i], nodes[j]) + widths[j].ln();
    let ln_v: Vec<f64> = nodes.iter().map(|&x| engine.weight().ln_eval(x)).collect();
    let d_range = grid.indices_within(profile.d_set.lo, profile.d_set.hi);
    if d_range.is_empty() {
        return Err(Error::Domain("no grid node inside D".into()));
    }
    let zeros = vec![0.0; size];

    // y-independent pieces of the prediction kernel
    let (pred_fv, pred_fd) = if scenario == Scenario::Prediction {
        (
            ln_row_sums(f, size, ln_f, &ln_v, 0..size, 0..size),
            ln_row_sums(f, size, ln_f, &zeros, d_range.clone(), d_range.clone()),
        )
    } else {
        (Vec::new(), Vec::new())
    };

    let mut stats = EnvStats {
        ln_upsilon: Vec::with_capacity(n),
        ln_psi: Vec::with_capacity(n),
        ln_z: Vec::with_capacity(n),
        in_k: Vec::with_capacity(n),
        ln_t_d: Vec::new(),
        d: f64::NAN,
        l_hat: 0.0,
        gamma_hat: 0.0,
        xi: Vec::with_capacity(n),
        xi_tilde: Vec::with_capacity(n),
    };
    for k in 0..n {
        let y = path.y[scenario.obs_index(k)];
        let ln_g: Vec<f64> = nodes.iter().map(|&x| ln_obs_density(&model, x, y)).collect();
        let (ln_ups, ln_psi) = match scenario {
            Scenario::Filter => {
                let gv: Vec<f64> = ln_g.iter().zip(&ln_v).map(|(a, b)| a + b).collect();
                let qv = ln_row_sums(f, size, ln_f, &gv, 0..size, 0..size);
                let ups = qv.iter().zip(&ln_v).map(|(q, v)| q - v).fold(f64::NEG_INFINITY, f64::max);
                let qd = ln_row_sums(f, size, ln_f, &ln_g, d_range.clone(), d_range.clone());
                (ups, qd.into_iter().fold(f64::INFINITY, f64::min))
            }
            Scenario::Prediction => {
                let ups = (0..size)
                    .map(|i| ln_g[i] + pred_fv[i] - ln_v[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let psi = d_range
                    .clone()
                    .zip(&pred_fd)
                    .map(|(i, fd)| ln_g[i] + fd)
                    .fold(f64::INFINITY, f64::min);
                (ups, psi)
            }
        };
        stats.ln_upsilon.push(ln_ups);
        stats.ln_psi.push(ln_psi);
        stats.ln_z.push(ln_ups.max(0.0) - ln_psi.min(0.0));
        stats.in_k.push(profile.ybar.contains(k_obs(scenario, path, k)?));
    }
    let nf = n as f64;
    stats.l_hat = stats.ln_z.iter().sum::<f64>() / nf;
    stats.gamma_hat = stats.in_k.iter().filter(|&&b| b).count() as f64 / nf;
    let (mut sz, mut si) = (0.0, 0usize);
    for k in 0..n {
        sz += stats.ln_z[k];
        si += stats.in_k[k] as usize;
        let m = (k + 1) as f64;
        stats.xi.push(sz / m - stats.l_hat);
        stats.xi_tilde.push(si as f64 / m - stats.gamma_hat);
    }
    Ok(stats)
}

/// `ln T_d(k) = ln(1 ^ eps-(k) mu_{C_d}(C_d ^ D))` with grid LD constants:
/// on the nodes of `C = C_d`, `Q(x_i, {x_j}) >= min f * width * min g`, so
/// `eps- mu_C(C ^ D) >= #(C ^ D) * width * min f * min g`.
pub(crate) fn ln_t_d_series(
    engine: &Engine,
    path: &ObservationPath,
    n: usize,
    profile: &DriftProfile,
    d: f64,
) -> Result<Vec<f64>> {
    let grid = engine.grid();
    let model = engine.model();
    let c = profile.c_of(d)?;
    let c_nodes = grid.indices_within(c.lo, c.hi);
    if c_nodes.is_empty() {
        return Err(Error::Domain(format!("no grid node inside C_d for d = {d}")));
    }
    let hull = Interval { lo: grid.nodes()[c_nodes.start], hi: grid.nodes()[c_nodes.end - 1] };
    let overlap = grid
        .indices_within(c.lo.max(profile.d_set.lo), c.hi.min(profile.d_set.hi))
        .len();
    if overlap == 0 {
        return Err(Error::Domain("C_d and D share no grid node".into()));
    }
    let min_width = grid.widths()[c_nodes].iter().copied().fold(f64::INFINITY, f64::min);
    let (ln_fmin, _) = ln_f_extremes(model, &hull);
    let base = (overlap as f64).ln() + min_width.ln() + ln_fmin;
    (0..n)
        .map(|k| {
            let y = path.y[engine.scenario().obs_index(k)];
            Ok((base + ln_g_extremes(model, &hull, y).0).min(0.0))
        })
        .collect()
}

/// Constants of the forgetting theorem for an observed environment. `rho`
/// is a plug-in value: it uses the path estimate `l_hat` in place of the
/// population mean of `ln Z`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub gamma_hat: f64,
    pub l_hat: f64,
    pub d_under: f64,
    pub gamma_minus: f64,
    pub gamma_plus: f64,
    pub beta: f64,
    pub d: f64,
    /// `ln(eps-/eps+)` bound of `C_d`; `rho_Cd = 1 - exp(2 ln_ratio)`.
    pub ln_ratio: f64,
    #[serde(rename = "rho_Cd")]
    pub rho_cd: f64,
    pub rho: f64,
    /// `ln(1 - rho)`; `rho` itself usually rounds to 1.
    pub ln_one_minus_rho: f64,
    pub rho_label: String,
}

impl TheoremConstants {
    /// `ln(1 - rho_Cd^(beta - gamma-))`.
    pub fn ln_one_minus_rho_cd_pow(&self) -> f64 {
        ln_one_minus_pow(self.ln_ratio, self.beta - self.gamma_minus)
    }

    /// `-d (gamma+ - beta) / 2 + 2 l_hat`
    pub fn drift_exponent(&self) -> f64 {
        -self.d * (self.gamma_plus - self.beta) / 2.0 + 2.0 * self.l_hat
    }

    /// `ln rho`.
    pub fn ln_rho(&self) -> f64 {
        (-self.ln_one_minus_rho.exp()).ln_1p()
    }

    /// Both defining inequalities, checked by substitution:
    /// `d (gamma+ - beta) / 2 > 2 l_hat` and
    /// `rho > rho_Cd^(beta - gamma-) v exp(-d (gamma+ - beta) / 2 + 2 l_hat)`.
    pub fn satisfies_conditions(&self) -> (bool, bool) {
        let cond_d = self.d * (self.gamma_plus - self.beta) / 2.0 > 2.0 * self.l_hat;
        let t = self.drift_exponent();
        let cond_rho = self.ln_one_minus_rho < self.ln_one_minus_rho_cd_pow()
            && self.ln_one_minus_rho < (-t.exp_m1()).ln()
            && self.rho < 1.0 + f64::EPSILON
            && self.ln_one_minus_rho < 0.0;
        (cond_d, cond_rho)
    }
}

/// `ln(1 - (1 - r^2)^p)` with `r = exp(ln_ratio)`.
fn ln_one_minus_pow(ln_ratio: f64, p: f64) -> f64 {
    if 2.0 * ln_ratio < -700.0 {
        p.ln() + 2.0 * ln_ratio
    } else {
        let r2 = (2.0 * ln_ratio).exp();
        (-(p * (-r2).ln_1p()).exp_m1()).ln()
    }
}

/// Whether `(gamma-, gamma+)` is admissible for `gamma_hat`:
/// `0 <= gamma- < gamma+ <= 1` and `gamma_hat > (1 - gamma-) v (1 + gamma+) / 2`.
pub fn gammas_feasible(gamma_hat: f64, gamma_minus: f64, gamma_plus: f64) -> bool {
    0.0 <= gamma_minus
        && gamma_minus < gamma_plus
        && gamma_plus <= 1.0
        && gamma_hat > (1.0 - gamma_minus).max((1.0 + gamma_plus) / 2.0)
}

/// Theorem constants with a fixed `rho_Cd`.
pub fn theorem_constants(l_hat: f64, gamma_hat: f64, rho_cd: f64, d_under: f64) -> Result<TheoremConstants> {
    if !(0.0..1.0).contains(&rho_cd) {
        return Err(Error::Domain(format!("rho_Cd must lie in [0, 1), got {rho_cd}")));
    }
    let ln_ratio = 0.5 * (1.0 - rho_cd).ln();
    theorem_constants_with(l_hat, gamma_hat, d_under, |_| Ok(ln_ratio))
}

/// Theorem constants where `rho_Cd` depends on the chosen level `d` through
/// `C_d`; `ln_ratio_at(d)` returns `ln inf (eps-/eps+)` for `C_d`.
pub fn theorem_constants_with(
    l_hat: f64,
    gamma_hat: f64,
    d_under: f64,
    ln_ratio_at: impl FnOnce(f64) -> Result<f64>,
) -> Result<TheoremConstants> {
    if !(gamma_hat > 2.0 / 3.0) {
        return Err(Error::GammaTooSmall { gamma_hat });
    }
    if !(l_hat >= 0.0 && l_hat.is_finite()) {
        return Err(Error::Domain(format!("l_hat must be finite and nonnegative, got {l_hat}")));
    }
    const EPS: f64 = 0.1;
    let slack = 3.0 * gamma_hat - 2.0;
    let gamma_minus = (1.0 - gamma_hat) + 0.1 * slack;
    let gamma_plus = (2.0 * gamma_hat - 1.0) - 0.1 * slack;
    let beta = 0.5 * (gamma_minus + gamma_plus);
    let d = d_under.max((4.0 * l_hat + EPS) / (gamma_plus - beta));
    let ln_ratio = ln_ratio_at(d)?.min(0.0);
    let p = beta - gamma_minus;
    let t = -d * (gamma_plus - beta) / 2.0 + 2.0 * l_hat;
    // rho is the midpoint of (lower bound, 1), so 1 - rho = (1 - lower bound) / 2.
    let ln_one_minus_lb = ln_one_minus_pow(ln_ratio, p).min((-t.exp_m1()).ln());
    let ln_one_minus_rho = ln_one_minus_lb - std::f64::consts::LN_2;
    Ok(TheoremConstants {
        gamma_hat,
        l_hat,
        d_under,
        gamma_minus,
        gamma_plus,
        beta,
        d,
        ln_ratio,
        rho_cd: rho_from_ln_ratio(ln_ratio),
        rho: 1.0 - ln_one_minus_rho.exp(),
        ln_one_minus_rho,
        rho_label: "plug-in".into(),
    })
}

/// Result of the growth, noise and observation-function checks on a scalar
/// model written as `X' = X + b(X) + sigma V`, `Y = h(X) + beta W`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EConditionsReport {
    pub radii: Vec<f64>,
    /// `sup_{r <= |x| <= R} (|x + b(x)| - |x|)` for each radius `r`.
    pub e1_values: Vec<f64>,
    pub e1_pass: bool,
    pub sigma_inf: f64,
    pub sigma_sup: f64,
    pub e2_pass: bool,
    /// Estimate of `limsup |x|^-1 ln |h(x)|`.
    pub e3_estimate: f64,
    pub e3_pass: bool,
}

impl EConditionsReport {
    pub fn all_pass(&self) -> bool {
        self.e1_pass && self.e2_pass && self.e3_pass
    }
}

/// Numerical check of the drift, noise and growth conditions up to
/// `sample_radius`.
pub fn check_e_conditions(model: &ModelSpec, sample_radius: f64) -> Result<EConditionsReport> {
    if !(sample_radius > 2.0 && sample_radius.is_finite()) {
        return Err(Error::Domain(format!("sample radius must exceed 2, got {sample_radius}")));
    }
    const RUNGS: usize = 40;
    const PER_UNIT: f64 = 20.0;
    let top = sample_radius;
    let first = 1.0f64;
    let last = top / 2.0;
    let radii: Vec<f64> = (0..RUNGS)
        .map(|i| first * (last / first).powf(i as f64 / (RUNGS - 1) as f64))
        .collect();
    let excess = |x: f64| model.signal_mean(x).abs() - x.abs();
    let e1_values: Vec<f64> = radii
        .iter()
        .map(|&r| {
            let samples = (((top - r) * PER_UNIT).ceil() as usize).max(2);
            (0..=samples)
                .map(|i| r + (top - r) * i as f64 / samples as f64)
                .map(|x| excess(x).max(excess(-x)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let decreasing = e1_values.windows(2).all(|w| w[1] < w[0]);
    let e1_pass = decreasing && *e1_values.last().expect("ladder is nonempty") < 0.0;

    let sigma = model.sigma();
    let e2_pass = sigma.is_finite() && sigma > 0.0;

    let e3_estimate = {
        let samples = 1000;
        (0..=samples)
            .map(|i| top / 2.0 + (top / 2.0) * i as f64 / samples as f64)
            .flat_map(|x| [x, -x])
            .map(|x| model.h(x).abs().ln() / x.abs())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let e3_pass = e3_estimate.is_finite() || e3_estimate == f64::NEG_INFINITY;

    Ok(EConditionsReport {
        radii,
        e1_values,
        e1_pass,
        sigma_inf: sigma,
        sigma_sup: sigma,
        e2_pass,
        e3_estimate,
        e3_pass,
    })
}

/// Fraction of `path` (from index `start`) inside `ybar`.
pub fn fraction_inside(path: &ObservationPath, ybar: &Interval, start: usize) -> f64 {
    let ys = &path.y[start.min(path.len())..];
    if ys.is_empty() {
        return 0.0;
    }
    ys.iter().filter(|&&y| ybar.contains(y)).count() as f64 / ys.len() as f64
}

/// Everything the checker reports for one model, weight and observation set.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub model: ModelSpec,
    pub weight: WeightSpec,
    pub scenario: Scenario,
    #[serde(rename = "K_set")]
    pub ybar: Interval,
    pub d_under: f64,
    #[serde(rename = "D")]
    pub d_set: Interval,
    #[serde(rename = "M_const")]
    pub m_const: Option<f64>,
    pub kappa: Option<f64>,
    /// LD constants of the smallest symmetric interval containing `D`.
    pub ld: LDReport,
    pub e_conditions: EConditionsReport,
    pub path_length: usize,
    pub seed: u64,
    pub gamma_hat: f64,
    pub l_hat: f64,
    pub upsilon_label: String,
    pub constants: Option<TheoremConstants>,
    pub constants_error: Option<String>,
    #[serde(rename = "C_d")]
    pub c_d: Option<Interval>,
    #[serde(rename = "V_d")]
    pub v_d: Option<f64>,
}

/// Runs every check on a simulated path of `n` steps.
pub fn assumption_report(
    engine: &Engine,
    ybar: &Interval,
    n: usize,
    seed: u64,
    sample_radius: f64,
) -> Result<AssumptionReport> {
    let model = *engine.model();
    let profile = drift_profile(&model, engine.weight(), ybar)?;
    let r = profile.d_set.lo.abs().max(profile.d_set.hi.abs());
    let ld = ld_constants(&model, r, ybar)?;
    let e_conditions = check_e_conditions(&model, sample_radius)?;
    let (_, path) = crate::models::simulate(&model, n + 1, seed)?;
    let env = env_stats_without_t(engine, &path, n, &profile)?;
    let tc = theorem_constants_with(env.l_hat, env.gamma_hat, profile.d_under, |d| {
        Ok(ld_constants_on(&model, &profile.c_of(d)?, ybar)?.ln_ratio)
    });
    let (c_d, v_d) = match &tc {
        Ok(t) => (Some(profile.c_of(t.d)?), Some(profile.v_of(t.d)?)),
        Err(_) => (None, None),
    };
    Ok(AssumptionReport {
        model,
        weight: *engine.weight(),
        scenario: engine.scenario(),
        ybar: *ybar,
        d_under: profile.d_under,
        d_set: profile.d_set,
        m_const: profile.m_const,
        kappa: profile.kappa,
        ld,
        e_conditions,
        path_length: n,
        seed,
        gamma_hat: env.gamma_hat,
        l_hat: env.l_hat,
        upsilon_label: "window-Upsilon".into(),
        constants_error: tc.as_ref().err().map(|e| e.to_string()),
        constants: tc.ok(),
        c_d,
        v_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{obs_density, simulate, transition_density};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nl() -> ModelSpec {
        ModelSpec::nonlinear(DriftFn::Linear { k: -0.5 }, 1.0, ObsFn::Linear { k: 1.0 }, 1.0).unwrap()
    }

    #[test]
    fn kappa_examples() {
        assert_relative_eq!(kappa(0.5, 1.5), 5.0, max_relative = 1e-15);
        let k = kappa(0.9, 1.1);
        assert!((k - (1.0 + 1.1 / 0.81 - 1.0 / 0.9)).abs() < 1e-15);
        assert!((k - 1.247).abs() < 1e-3);
    }

    #[test]
    fn psi_example_and_exactness() {
        let lin = ModelSpec::linear(0.5, 1.0).unwrap();
        let v = WeightSpec::exp_square(1.5).unwrap();
        let ybar = Interval::symmetric(1.0).unwrap();
        let p = drift_profile(&lin, &v, &ybar).unwrap();
        let expected = 0.5 - ((2.0 * std::f64::consts::PI).ln() + 0.5f64.ln()) / 2.0;
        assert_relative_eq!(p.psi(0.0, 1.0), expected, max_relative = 1e-14);
        assert!((expected + 0.0724).abs() < 1e-4);
        // At x = 0 the supremum over [-1, 1] is attained at y = +-1.
        assert_relative_eq!(p.w(0.0), -expected, max_relative = 1e-14);

        // psi against the display with kappa, at beta_obs = 1
        let (alpha, c) = (0.5, 1.5);
        let kap = kappa(alpha, c);
        for &(x, y) in &[(0.3, -0.7), (-2.0, 1.0), (4.0, 0.2)] {
            let display = -kap * alpha * alpha * x * x / 2.0 + alpha * x * y / (2.0 - c)
                + y * y / 2.0 * (1.0 / (2.0 - c) - 1.0)
                - ((2.0 * std::f64::consts::PI).ln() + (2.0 - c).ln()) / 2.0;
            assert_relative_eq!(p.psi(x, y), display, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn kappa_nonpositive_reports_range() {
        let lin = ModelSpec::linear(0.5, 1.0).unwrap();
        let v = WeightSpec::exp_square(1.95).unwrap();
        match drift_profile(&lin, &v, &Interval::symmetric(1.0).unwrap()) {
            Err(Error::KappaNonpositive { kappa, c_hi, .. }) => {
                assert!(kappa <= 0.0);
                assert!(c_hi < 1.95 && kappa_general(0.5, c_hi - 1e-9, 1.0) > 0.0);
                assert!(kappa_general(0.5, c_hi + 1e-6, 1.0) <= 0.0);
            }
            other => panic!("expected KappaNonpositive, got {other:?}"),
        }
    }

    #[test]
    fn nonlinear_profile_numbers() {
        let v = WeightSpec::exp_abs(1.0).unwrap();
        let p = drift_profile(&nl(), &v, &Interval::symmetric(3.0).unwrap()).unwrap();
        let psi0 = std::f64::consts::LN_2 + 0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(p.d_under, 0.5 - psi0, max_relative = 1e-9);
        assert!(p.d_set.contains_interval(&Interval::symmetric(1.0).unwrap()));
        // W(x) = |x|/2 - psi0 off the origin, so C_d = [-2(d + psi0), 2(d + psi0)].
        let c = p.c_of(2.0).unwrap();
        assert!((c.hi - 2.0 * (2.0 + psi0)).abs() < 1e-9);
        assert!((c.lo + 2.0 * (2.0 + psi0)).abs() < 1e-9);
        assert!(c.hi >= 2.0 * (2.0 + psi0));
        assert_relative_eq!(p.ln_v_of(2.0).unwrap(), c.hi, max_relative = 1e-12);
    }

    #[test]
    fn ld_constants_match_brute_force() {
        let lin = ModelSpec::linear(0.5, 1.0).unwrap();
        let ybar = Interval::symmetric(2.0).unwrap();
        let rep = ld_constants(&lin, 2.0, &ybar).unwrap();
        assert!(rep.eps_minus_tilde > 0.0 && rep.eps_minus_tilde <= rep.eps_plus_tilde);
        assert!(rep.rho_cd > 0.0 && rep.rho_cd < 1.0);

        // odd count so the grid contains 0, where the extremes are attained
        let n = 401;
        let pts: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let (mut fmin, mut fmax) = (f64::INFINITY, 0.0f64);
        for &x in &pts {
            for &xn in &pts {
                let f = transition_density(&lin, x, xn);
                fmin = fmin.min(f);
                fmax = fmax.max(f);
            }
        }
        assert_relative_eq!(rep.eps_minus_tilde, fmin * 4.0, max_relative = 1e-9);
        assert_relative_eq!(rep.eps_plus_tilde, fmax * 4.0, max_relative = 1e-9);

        let mut worst: f64 = 0.0;
        for &y in &pts {
            let gs: Vec<f64> = pts.iter().map(|&x| obs_density(&lin, x, y)).collect();
            let gmin = gs.iter().copied().fold(f64::INFINITY, f64::min);
            let gmax = gs.iter().copied().fold(0.0, f64::max);
            assert_relative_eq!(rep.eps_minus(y), fmin * 4.0 * gmin, max_relative = 1e-9);
            assert_relative_eq!(rep.eps_plus(y), fmax * 4.0 * gmax, max_relative = 1e-9);
            worst = worst.max(1.0 - (fmin * gmin / (fmax * gmax)).powi(2));
        }
        assert_relative_eq!(rep.rho_cd, worst, max_relative = 1e-9);
    }

    #[test]
    fn ld_degenerate_cases() {
        let flat = ModelSpec::nonlinear(DriftFn::Linear { k: -0.5 }, 1.0, ObsFn::Constant { value: 0.0 }, 1.0).unwrap();
        let ybar = Interval::symmetric(3.0).unwrap();
        let tiny = ld_constants(&flat, 1e-6, &ybar).unwrap();
        assert!(tiny.eps_minus_tilde / tiny.eps_plus_tilde > 1.0 - 1e-10);
        assert!(tiny.rho_cd < 1e-10);
        assert!(ld_constants(&flat, 0.0, &ybar).is_err());
        assert!(ld_constants(&flat, -1.0, &ybar).is_err());
    }

    #[test]
    fn ld_sandwich_spot_checks() {
        let m = nl();
        let ybar = Interval::symmetric(3.0).unwrap();
        let rep = ld_constants(&m, 2.5, &ybar).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = rng.random_range(-2.5..2.5);
            let a = rng.random_range(-2.5..2.5);
            let b = rng.random_range(-2.5..2.5);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            let mass = crate::quad::integrate(a, b, 4, |xn| transition_density(&m, x, xn));
            let mu = (b - a) / 5.0;
            assert!(rep.eps_minus_tilde * mu <= mass * (1.0 + 1e-12));
            assert!(mass <= rep.eps_plus_tilde * mu * (1.0 + 1e-12));
        }
    }

    #[test]
    fn sine_image_is_exact() {
        let m = ModelSpec::nonlinear(
            DriftFn::Linear { k: -0.5 },
            1.0,
            ObsFn::Sine { amplitude: 2.0, frequency: 1.0 },
            1.0,
        )
        .unwrap();
        let h = obs_image(&m, &Interval::new(0.0, 1.0).unwrap());
        assert_relative_eq!(h.hi, 2.0 * 1f64.sin(), max_relative = 1e-15);
        assert_eq!(h.lo, 0.0);
        let h = obs_image(&m, &Interval::new(0.0, 2.0).unwrap());
        assert_relative_eq!(h.hi, 2.0, max_relative = 1e-15);
    }

    #[test]
    fn theorem_constant_examples() {
        assert!(gammas_feasible(0.9, 0.2, 0.7));
        assert!(matches!(theorem_constants(0.1, 0.6, 0.5, 0.0), Err(Error::GammaTooSmall { .. })));
        let tc = theorem_constants(0.3, 0.9, 0.5, 0.2).unwrap();
        assert!(gammas_feasible(0.9, tc.gamma_minus, tc.gamma_plus));
        assert!(tc.gamma_minus < tc.beta && tc.beta < tc.gamma_plus);
        assert!(tc.d >= tc.d_under);
        assert_eq!(tc.satisfies_conditions(), (true, true));
        assert!(tc.rho > 0.0 && tc.rho < 1.0);

        // l_hat = 0: d = d_under once d_under exceeds 0.1 / (gamma+ - beta), and rho
        // sits halfway between rho_Cd^(beta - gamma-) and 1.
        let tc0 = theorem_constants(0.0, 0.9, 0.5, 10.0).unwrap();
        assert_eq!(tc0.d, 10.0);
        let lb = 0.5f64.powf(tc0.beta - tc0.gamma_minus).max((-tc0.d * (tc0.gamma_plus - tc0.beta) / 2.0).exp());
        assert_relative_eq!(tc0.rho, 0.5 * (1.0 + lb), max_relative = 1e-12);
    }

    #[test]
    fn theorem_constants_with_tiny_ratio() {
        let tc = theorem_constants_with(50.0, 0.99, 0.0, |_| Ok(-2000.0)).unwrap();
        assert_eq!(tc.rho, 1.0);
        assert!(tc.ln_one_minus_rho < -3000.0);
        assert_eq!(tc.satisfies_conditions(), (true, true));
    }

    #[test]
    fn e_conditions() {
        let rep = check_e_conditions(&nl(), 1e3).unwrap();
        assert!(rep.all_pass());
        for (r, v) in rep.radii.iter().zip(&rep.e1_values) {
            assert_relative_eq!(*v, -r / 2.0, max_relative = 1e-12);
        }
        let explosive =
            ModelSpec::nonlinear(DriftFn::Linear { k: 1.0 }, 1.0, ObsFn::Linear { k: 1.0 }, 1.0).unwrap();
        let bad = check_e_conditions(&explosive, 1e3).unwrap();
        assert!(!bad.e1_pass);
        assert!(bad.e2_pass && bad.e3_pass);
        assert!(rep.e3_estimate < 0.02);
    }

    #[test]
    fn gamma_hat_for_three_sd_window() {
        let lin = ModelSpec::linear(0.5, 1.0).unwrap();
        let sd = crate::models::observation_sd(&lin, 0).unwrap();
        let (_, path) = simulate(&lin, 10_000, 12).unwrap();
        let ybar = Interval::symmetric(3.0 * sd).unwrap();
        assert!(fraction_inside(&path, &ybar, 0) > 0.99);
        let all = Interval::symmetric(1e9).unwrap();
        assert_eq!(fraction_inside(&path, &all, 0), 1.0);
    }

    #[test]
    fn drift_inequality_spot_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (ModelSpec::linear(0.9, 1.0).unwrap(), WeightSpec::exp_square(1.1).unwrap(), 7.5),
            (ModelSpec::linear(0.5, 1.0).unwrap(), WeightSpec::exp_square(1.5).unwrap(), 4.5),
            (nl(), WeightSpec::exp_abs(1.0).unwrap(), 4.0),
        ];
        for (model, v, ybar_r) in cases {
            let ybar = Interval::symmetric(ybar_r).unwrap();
            let p = drift_profile(&model, &v, &ybar).unwrap();
            let d = p.d_under + 1.0;
            let c = p.c_of(d).unwrap();
            let reach = 2.0 * c.hi.abs().max(c.lo.abs());
            for _ in 0..200 {
                let x = loop {
                    let x = rng.random_range(-reach..reach);
                    if !c.contains(x) {
                        break x;
                    }
                };
                let y = rng.random_range(ybar.lo..ybar.hi);
                let centre = model.signal_mean(x);
                let ratio = crate::quad::integrate(centre - 40.0, centre + 40.0, 80, |z| {
                    (ln_transition_density(&model, x, z) + ln_obs_density(&model, z, y) + v.ln_eval(z)
                        - v.ln_eval(x))
                    .exp()
                });
                assert!(ratio <= (-p.w(x)).exp() + 1e-9, "x = {x}, y = {y}: {ratio} vs W = {}", p.w(x));
            }
        }
    }
}
