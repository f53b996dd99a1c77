//! Stability experiments: paired filter runs on simulated paths, the
//! forgetting and V-moment bounds evaluated along them, decay-rate fits, and
//! the divergence of prediction-filter V-integrals under a fast-growing weight.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assumptions::{
    drift_profile, env_stats_without_t, kappa_general, ld_constants_on, ln_t_d_series, theorem_constants_with,
    DriftProfile, EnvStats, Interval, TheoremConstants,
};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::gaussian::{gaussian_v_moment, kalman_predict, kalman_update, stationary_pi, GaussianState};
use crate::measure::{Grid, GridMeasure, WeightSpec, TAIL_TOLERANCE};
use crate::models::{observation_sd, simulate, ModelSpec, ObservationPath, Scenario};

/// Gaps from the difference recursion keep relative precision far below
/// machine epsilon; fits stop here.
pub const GAP_FLOOR: f64 = 1e-250;
/// Floor for gaps obtained by subtracting two normalized filters.
pub const DIRECT_GAP_FLOOR: f64 = 1e-14;
/// Slack allowed when comparing a quantity with its bound.
pub const BOUND_SLACK: f64 = 1e-6;
/// Minimum coefficient of determination for a fit to count as clean decay.
pub const R2_MIN: f64 = 0.8;

/// Initial law on the grid, written `gaussian:M:V`, `uniform:A:B` or `point:X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum InitSpec {
    Gaussian { mean: f64, var: f64 },
    Uniform { lo: f64, hi: f64 },
    Point { x: f64 },
}

impl FromStr for InitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |t: &str| -> Result<f64> {
            t.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{t}' in init spec '{s}'")))
        };
        match parts.as_slice() {
            ["gaussian", m, v] => Ok(InitSpec::Gaussian { mean: num(m)?, var: num(v)? }),
            ["uniform", a, b] => Ok(InitSpec::Uniform { lo: num(a)?, hi: num(b)? }),
            ["point", x] => Ok(InitSpec::Point { x: num(x)? }),
            _ => Err(Error::Parse(format!(
                "init spec '{s}' must be gaussian:M:V, uniform:A:B or point:X"
            ))),
        }
    }
}

impl std::fmt::Display for InitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitSpec::Gaussian { mean, var } => write!(f, "gaussian:{mean}:{var}"),
            InitSpec::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
            InitSpec::Point { x } => write!(f, "point:{x}"),
        }
    }
}

impl InitSpec {
    pub fn measure(&self, grid: &Grid) -> Result<GridMeasure> {
        match *self {
            InitSpec::Gaussian { mean, var } => GridMeasure::gaussian(grid.clone(), mean, var),
            InitSpec::Uniform { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::Domain(format!("uniform init needs lo < hi, got [{lo}, {hi}]")));
                }
                let range = grid.indices_within(lo, hi);
                if range.is_empty() {
                    return Err(Error::Domain(format!("no grid node in [{lo}, {hi}]")));
                }
                let mut w = vec![0.0; grid.len()];
                let total: f64 = grid.widths()[range.clone()].iter().sum();
                for i in range {
                    w[i] = grid.widths()[i] / total;
                }
                GridMeasure::new(grid.clone(), w)
            }
            InitSpec::Point { x } => {
                if !(grid.lo() <= x && x <= grid.hi()) {
                    return Err(Error::Domain(format!("point {x} lies outside the grid")));
                }
                let nearest = grid
                    .nodes()
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
                    .map(|(i, _)| i)
                    .expect("grid is nonempty");
                GridMeasure::dirac(grid.clone(), nearest)
            }
        }
    }
}

fn default_scenario() -> Scenario {
    Scenario::Filter
}

fn default_ybar_sd() -> f64 {
    3.0
}

fn default_x() -> f64 {
    0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(rename = "L")]
    pub half_width: f64,
    pub points: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        Grid::symmetric(self.half_width, self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    pub n: usize,
    /// Number of seeds; seeds are `seed_offset..seed_offset + seeds`.
    pub seeds: usize,
    #[serde(default)]
    pub seed_offset: u64,
    pub burn: usize,
    pub init: String,
    pub init_tilde: String,
    /// Half-width of the observation set; overrides `ybar_sd`.
    #[serde(default)]
    pub ybar: Option<f64>,
    /// Half-width of the observation set in units of `sd(Y)`.
    #[serde(default = "default_ybar_sd")]
    pub ybar_sd: f64,
    /// Lower bound on the drift level `d`.
    #[serde(default)]
    pub d: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceParams {
    pub alpha: f64,
    pub c: f64,
    pub rmax: f64,
    #[serde(default = "default_x")]
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelSpec,
    pub weight: WeightSpec,
    pub grid: GridConfig,
    pub experiment: ExperimentParams,
    #[serde(default)]
    pub divergence: Option<DivergenceParams>,
}

pub const PRESET_NAMES: [&str; 3] = ["linear-filter-stable", "linear-prediction-divergent", "nonlinear-e-conditions"];

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(s)?;
        cfg.model = cfg.model.validated()?;
        cfg.weight = WeightSpec::new(cfg.weight.family, cfg.weight.c)?;
        cfg.init()?;
        cfg.init_tilde()?;
        if cfg.experiment.n == 0 || cfg.experiment.seeds == 0 {
            return Err(Error::Domain("experiment needs n >= 1 and seeds >= 1".into()));
        }
        Ok(cfg)
    }

    /// Reads a config file, or a preset when `path` names one.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            if let Some(cfg) = path.to_str().and_then(|s| Self::preset(s).ok()) {
                return Ok(cfg);
            }
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "linear-filter-stable" => include_str!("../presets/linear-filter-stable.toml"),
            "linear-prediction-divergent" => include_str!("../presets/linear-prediction-divergent.toml"),
            "nonlinear-e-conditions" => include_str!("../presets/nonlinear-e-conditions.toml"),
            other => return Err(Error::Parse(format!("unknown preset '{other}'"))),
        };
        Self::from_toml(text)
    }

    pub fn init(&self) -> Result<InitSpec> {
        self.experiment.init.parse()
    }

    pub fn init_tilde(&self) -> Result<InitSpec> {
        self.experiment.init_tilde.parse()
    }

    pub fn seeds(&self) -> Vec<u64> {
        let start = self.experiment.seed_offset;
        (start..start + self.experiment.seeds as u64).collect()
    }

    /// Observation set: explicit half-width, or `ybar_sd` standard deviations of `Y`.
    pub fn ybar(&self) -> Result<Interval> {
        match self.experiment.ybar {
            Some(r) => Interval::symmetric(r),
            None => Interval::symmetric(self.experiment.ybar_sd * observation_sd(&self.model, 0)?),
        }
    }
}

/// `ln nu(V)` and `ln nu Q(D)` of an initial law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitTerms {
    pub ln_v: f64,
    pub ln_q_d: f64,
}

/// Path-dependent inputs of both bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundContext {
    pub ln_z: Vec<f64>,
    pub in_k: Vec<bool>,
    /// `ln T_d` at level `d`.
    pub ln_t_d: Vec<f64>,
    pub d: f64,
    pub ln_v_d: f64,
    pub nu: InitTerms,
    pub nu_tilde: InitTerms,
    pub ln_vmom: Vec<f64>,
    pub ln_vmom_tilde: Vec<f64>,
}

impl BoundContext {
    /// `I_{0,n-1}`.
    pub fn i_count(&self, n: usize) -> usize {
        self.in_k[..n].iter().filter(|&&b| b).count()
    }
}

/// Whether `n^-1 I_{0,n-1} >= (1 - gamma-) v (1 + gamma+) / 2`.
pub fn qualifies(ctx: &BoundContext, n: usize, tc: &TheoremConstants) -> bool {
    n > 0 && ctx.i_count(n) as f64 / n as f64 >= (1.0 - tc.gamma_minus).max((1.0 + tc.gamma_plus) / 2.0)
}

fn ln_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln` of the forgetting bound at step `n` for level `d`.
pub fn ln_forget_bound(ctx: &BoundContext, n: usize, d: f64, tc: &TheoremConstants) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    let e1 = (n as f64 * (tc.beta - tc.gamma_minus)).floor();
    let ln_rho_cd = (-(2.0 * tc.ln_ratio).exp()).ln_1p();
    let contraction = if e1 == 0.0 { 0.0 } else { e1 * ln_rho_cd };
    let first = ln2 + contraction + ctx.ln_vmom[n] + ctx.ln_vmom_tilde[n];
    let e2 = (n as f64 * (tc.gamma_plus - tc.beta)).floor();
    let sum_z: f64 = ctx.ln_z[..n].iter().sum();
    let second = ln2 + (ctx.nu.ln_v - ctx.nu.ln_q_d) + (ctx.nu_tilde.ln_v - ctx.nu_tilde.ln_q_d) - d * e2 / 2.0
        + 2.0 * sum_z;
    ln_add(first, second)
}

pub fn forget_bound(ctx: &BoundContext, n: usize, d: f64, tc: &TheoremConstants) -> f64 {
    ln_forget_bound(ctx, n, d, tc).exp()
}

/// `ln` of the V-moment bound at step `n >= 1`, for the run started from
/// `init`, using `T_d` and `V_d` at the context's level `ctx.d`.
pub fn ln_echeck_bound(ctx: &BoundContext, n: usize, init: &InitTerms) -> f64 {
    assert!(n >= 1, "the V-moment bound starts at n = 1");
    let d = ctx.d;
    let mut prefix_z = vec![0.0; n + 1];
    let mut prefix_i = vec![0usize; n + 1];
    for i in 0..n {
        prefix_z[i + 1] = prefix_z[i] + ctx.ln_z[i];
        prefix_i[i + 1] = prefix_i[i] + ctx.in_k[i] as usize;
    }
    let mut acc = init.ln_v - init.ln_q_d - d * prefix_i[n] as f64 + prefix_z[n];
    for k in 1..=n {
        let i_tail = (prefix_i[n] - prefix_i[k - 1]) as f64;
        let z_tail = prefix_z[n] - prefix_z[k - 1];
        acc = ln_add(acc, ctx.ln_v_d + d - d * i_tail - ctx.ln_t_d[k - 1] + z_tail);
    }
    acc
}

pub fn echeck_bound(ctx: &BoundContext, n: usize, init: &InitTerms) -> f64 {
    ln_echeck_bound(ctx, n, init).exp()
}

/// Least-squares fit of `ln value` against step index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `exp(slope)`
    pub rho_hat: f64,
    pub first: usize,
    pub last: usize,
    pub used: usize,
}

impl RateFit {
    pub fn is_clean_decay(&self) -> bool {
        self.slope < 0.0 && self.r2 > R2_MIN
    }
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

/// Fits `ln values[k]` for `k >= start`, stopping at the first value that is
/// not above `floor`.
pub fn fit_log_linear(values: &[f64], start: usize, floor: f64) -> Result<RateFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &v) in values.iter().enumerate().skip(start) {
        if !(v > floor && v.is_finite()) {
            break;
        }
        xs.push(k as f64);
        ys.push(v.ln());
    }
    if xs.len() < 5 {
        return Err(Error::DegenerateFit { usable: xs.len() });
    }
    let (slope, intercept, r2) = least_squares(&xs, &ys);
    Ok(RateFit {
        slope,
        intercept,
        r2,
        rho_hat: slope.exp(),
        first: start,
        last: start + xs.len() - 1,
        used: xs.len(),
    })
}

/// Decay-rate fit of a trace's V-norm gap over `[burn, n]`.
pub fn rate_estimate(trace: &StabilityTrace, burn: usize) -> Result<RateFit> {
    fit_log_linear(&trace.gap_v, burn, GAP_FLOOR)
}

/// Trend of `rho^-n gap(n)` over the final quarter of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    pub start: usize,
    pub end: usize,
    /// Least-squares slope of `ln gap(n) - n ln rho`.
    pub slope: f64,
    pub ln_first: f64,
    pub ln_last: f64,
    pub decreasing: bool,
}

/// `rho^-n gap(n)` counts as decreasing over the final quarter when its
/// log-linear trend is negative and it ends below where it started.
pub fn final_quartile_decay(gap: &[f64], ln_rho: f64) -> DecayCheck {
    let end = gap.len().saturating_sub(1);
    let start = 3 * end / 4;
    let pts: Vec<(f64, f64)> = (start..=end)
        .filter(|&k| gap[k] > 0.0 && gap[k].is_finite())
        .map(|k| (k as f64, gap[k].ln() - k as f64 * ln_rho))
        .collect();
    if pts.len() < 2 {
        return DecayCheck { start, end, slope: f64::NAN, ln_first: f64::NAN, ln_last: f64::NAN, decreasing: false };
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, _, _) = least_squares(&xs, &ys);
    let (ln_first, ln_last) = (ys[0], ys[ys.len() - 1]);
    DecayCheck { start, end, slope, ln_first, ln_last, decreasing: slope < 0.0 && ln_last < ln_first }
}

/// One seed of a stability experiment.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityTrace {
    pub seed: u64,
    pub scenario: Scenario,
    pub n: usize,
    /// `||eta_n - eta~_n||_V` from the difference recursion, `n = 0..=N`.
    pub gap_v: Vec<f64>,
    /// Same gap from subtracting the two normalized filters.
    pub gap_v_direct: Vec<f64>,
    pub vmom: Vec<f64>,
    pub vmom_tilde: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_tilde: Vec<f64>,
    /// `I_{0,n-1}` for `n = 0..=N`.
    pub i_count: Vec<usize>,
    pub qualifies: Vec<bool>,
    pub ln_bound_forget: Vec<f64>,
    /// `NaN` at `n = 0`.
    pub ln_bound_echeck: Vec<f64>,
    pub ln_bound_echeck_tilde: Vec<f64>,
    pub tail_diag_max: f64,
    pub constants: TheoremConstants,
    pub ybar: Interval,
    #[serde(skip)]
    pub env: EnvStats,
    #[serde(skip)]
    pub context: BoundContext,
}

impl StabilityTrace {
    pub fn bound_forget(&self, n: usize) -> f64 {
        self.ln_bound_forget[n].exp()
    }

    pub fn bound_echeck(&self, n: usize) -> f64 {
        self.ln_bound_echeck[n].exp()
    }

    pub fn bound_echeck_tilde(&self, n: usize) -> f64 {
        self.ln_bound_echeck_tilde[n].exp()
    }

    /// Qualifying steps where the gap exceeds the forgetting bound.
    pub fn forget_violations(&self) -> Vec<usize> {
        let slack = BOUND_SLACK.ln_1p();
        (0..=self.n)
            .filter(|&k| self.qualifies[k] && self.gap_v[k].ln() > self.ln_bound_forget[k] + slack)
            .collect()
    }

    /// Steps `n >= 1` where either V-moment exceeds its bound.
    pub fn echeck_violations(&self) -> Vec<usize> {
        let slack = BOUND_SLACK.ln_1p();
        (1..=self.n)
            .filter(|&k| {
                self.vmom[k].ln() > self.ln_bound_echeck[k] + slack
                    || self.vmom_tilde[k].ln() > self.ln_bound_echeck_tilde[k] + slack
            })
            .collect()
    }

    pub fn first_qualifying(&self) -> Option<usize> {
        self.qualifies.iter().position(|&q| q)
    }

    pub fn accepted(&self) -> bool {
        self.tail_diag_max < TAIL_TOLERANCE
    }

    pub fn decay(&self) -> DecayCheck {
        final_quartile_decay(&self.gap_v, self.constants.ln_rho())
    }

    /// Columns `n,gap_v,bound_forget,vmom,vmom_tilde,bound_echeck,lambda,
    /// lambda_tilde,i_count`, then `bound_echeck_tilde,qualifies,gap_v_direct`
    /// and the natural logs of the three bounds (the bounds themselves often
    /// overflow). Undefined entries are left empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "n,gap_v,bound_forget,vmom,vmom_tilde,bound_echeck,lambda,lambda_tilde,i_count,bound_echeck_tilde,qualifies,gap_v_direct,ln_bound_forget,ln_bound_echeck,ln_bound_echeck_tilde"
        )?;
        let opt = |k: usize, v: &[f64]| v.get(k).map(|x| fmt_f64(*x)).unwrap_or_default();
        for k in 0..=self.n {
            let (echeck, echeck_t, ln_e, ln_et) = if k == 0 {
                Default::default()
            } else {
                (
                    fmt_f64(self.bound_echeck(k)),
                    fmt_f64(self.bound_echeck_tilde(k)),
                    fmt_f64(self.ln_bound_echeck[k]),
                    fmt_f64(self.ln_bound_echeck_tilde[k]),
                )
            };
            writeln!(
                out,
                "{k},{},{},{},{},{echeck},{},{},{},{echeck_t},{},{},{},{ln_e},{ln_et}",
                fmt_f64(self.gap_v[k]),
                fmt_f64(self.bound_forget(k)),
                fmt_f64(self.vmom[k]),
                fmt_f64(self.vmom_tilde[k]),
                opt(k, &self.lambda),
                opt(k, &self.lambda_tilde),
                self.i_count[k],
                self.qualifies[k] as u8,
                fmt_f64(self.gap_v_direct[k]),
                fmt_f64(self.ln_bound_forget[k]),
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Everything shared by the seeds of one experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub engine: Engine,
    pub profile: DriftProfile,
    pub lambda0: GridMeasure,
    pub lambda0_tilde: GridMeasure,
    pub n: usize,
    pub ybar: Interval,
    /// Lower bound on `d`; the level used is raised to satisfy the theorem's
    /// conditions.
    pub d_min: Option<f64>,
}

impl Experiment {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &ModelSpec,
        scenario: Scenario,
        grid: &Grid,
        lambda0: GridMeasure,
        lambda0_tilde: GridMeasure,
        n: usize,
        v: WeightSpec,
        ybar: Interval,
        d_min: Option<f64>,
    ) -> Result<Self> {
        for m in [&lambda0, &lambda0_tilde] {
            if !m.is_probability(1e-9) {
                return Err(Error::Domain("initial laws must be probability measures".into()));
            }
            if !crate::measure::vnorm(m, &v).is_finite() {
                return Err(Error::Domain("initial law has infinite V-moment".into()));
            }
        }
        let profile = drift_profile(model, &v, &ybar)?;
        if let Some(d) = d_min {
            if d < profile.d_under {
                return Err(Error::Domain(format!("d = {d} is below d_under = {}", profile.d_under)));
            }
        }
        let engine = Engine::new(model, scenario, grid, v)?;
        Ok(Self { engine, profile, lambda0, lambda0_tilde, n, ybar, d_min })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let grid = cfg.grid.build()?;
        Self::new(
            &cfg.model,
            cfg.experiment.scenario,
            &grid,
            cfg.init()?.measure(&grid)?,
            cfg.init_tilde()?.measure(&grid)?,
            cfg.experiment.n,
            cfg.weight,
            cfg.ybar()?,
            cfg.experiment.d,
        )
    }

    fn init_terms(&self, run: &crate::engine::FilterRun) -> InitTerms {
        let d_nodes = self.engine.grid().indices_within(self.profile.d_set.lo, self.profile.d_set.hi);
        let eta1_d: f64 = run.etas[1].weights()[d_nodes].iter().sum();
        InitTerms { ln_v: run.v_moments[0].ln(), ln_q_d: run.lambdas[0].ln() + eta1_d.ln() }
    }

    /// Simulates the path for `seed` and evaluates everything along it.
    pub fn run_seed(&self, seed: u64) -> Result<StabilityTrace> {
        self.run_seed_inner(seed).map_err(|e| Error::Seed { seed, source: Box::new(e) })
    }

    fn run_seed_inner(&self, seed: u64) -> Result<StabilityTrace> {
        let n = self.n;
        let model = *self.engine.model();
        let (_, path) = simulate(&model, n + 1, seed)?;
        self.run_path(seed, &path)
    }

    /// Runs the pair of filters along a given path.
    pub fn run_path(&self, seed: u64, path: &ObservationPath) -> Result<StabilityTrace> {
        let n = self.n;
        let model = *self.engine.model();
        let pair = self.engine.run_pair(&self.lambda0, &self.lambda0_tilde, path, n)?;
        let mut env = env_stats_without_t(&self.engine, path, n, &self.profile)?;
        let d_floor = self.d_min.unwrap_or(self.profile.d_under).max(self.profile.d_under);
        let profile = &self.profile;
        let ybar = self.ybar;
        let tc = theorem_constants_with(env.l_hat, env.gamma_hat, d_floor, |d| {
            Ok(ld_constants_on(&model, &profile.c_of(d)?, &ybar)?.ln_ratio)
        })?;
        let d = tc.d;
        env.ln_t_d = ln_t_d_series(&self.engine, path, n, profile, d)?;
        env.d = d;

        let ctx = BoundContext {
            ln_z: env.ln_z.clone(),
            in_k: env.in_k.clone(),
            ln_t_d: env.ln_t_d.clone(),
            d,
            ln_v_d: profile.ln_v_of(d)?,
            nu: self.init_terms(&pair.run),
            nu_tilde: self.init_terms(&pair.run_tilde),
            ln_vmom: pair.run.v_moments.iter().map(|v| v.ln()).collect(),
            ln_vmom_tilde: pair.run_tilde.v_moments.iter().map(|v| v.ln()).collect(),
        };
        let i_count: Vec<usize> = (0..=n).map(|k| ctx.i_count(k)).collect();
        let qualifies_v: Vec<bool> = (0..=n).map(|k| qualifies(&ctx, k, &tc)).collect();
        let ln_bound_forget: Vec<f64> = (0..=n).map(|k| ln_forget_bound(&ctx, k, d, &tc)).collect();
        let echeck = |init: &InitTerms| -> Vec<f64> {
            std::iter::once(f64::NAN).chain((1..=n).map(|k| ln_echeck_bound(&ctx, k, init))).collect()
        };
        let ln_bound_echeck = echeck(&ctx.nu);
        let ln_bound_echeck_tilde = echeck(&ctx.nu_tilde);
        let tail_diag_max = pair.run.max_tail_diag().max(pair.run_tilde.max_tail_diag());
        Ok(StabilityTrace {
            seed,
            scenario: self.engine.scenario(),
            n,
            gap_v: pair.gap_v,
            gap_v_direct: pair.gap_v_direct,
            vmom: pair.run.v_moments,
            vmom_tilde: pair.run_tilde.v_moments,
            lambda: pair.run.lambdas,
            lambda_tilde: pair.run_tilde.lambdas,
            i_count,
            qualifies: qualifies_v,
            ln_bound_forget,
            ln_bound_echeck,
            ln_bound_echeck_tilde,
            tail_diag_max,
            constants: tc,
            ybar,
            env,
            context: ctx,
        })
    }

    /// Runs every seed; results are sorted by seed whichever mode is used.
    pub fn run_seeds(&self, seeds: &[u64], parallel: bool) -> Result<Vec<StabilityTrace>> {
        let mut out: Vec<StabilityTrace> = if parallel {
            seeds.par_iter().map(|&s| self.run_seed(s)).collect::<Result<_>>()?
        } else {
            seeds.iter().map(|&s| self.run_seed(s)).collect::<Result<_>>()?
        };
        out.sort_by_key(|t| t.seed);
        Ok(out)
    }
}

/// Single-seed stability run, building the grid experiment from scratch.
#[allow(clippy::too_many_arguments)]
pub fn stability_run(
    model: &ModelSpec,
    scenario: Scenario,
    grid: &Grid,
    lambda0: &GridMeasure,
    lambda0_tilde: &GridMeasure,
    n: usize,
    seed: u64,
    v: WeightSpec,
    ybar: Interval,
    d: Option<f64>,
) -> Result<StabilityTrace> {
    Experiment::new(model, scenario, grid, lambda0.clone(), lambda0_tilde.clone(), n, v, ybar, d)?.run_seed(seed)
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
    pub fit_direct: Option<RateFit>,
    pub decay: DecayCheck,
    pub forgetting: bool,
    pub qualifying_steps: usize,
    pub first_qualifying: Option<usize>,
    pub forget_bound_ok: bool,
    pub echeck_bound_ok: bool,
    pub tail_diag_max: f64,
    pub accepted: bool,
    pub gamma_hat: f64,
    pub l_hat: f64,
    pub constants: TheoremConstants,
}

impl SeedSummary {
    pub fn new(trace: &StabilityTrace, burn: usize) -> Self {
        let fit = rate_estimate(trace, burn);
        let decay = trace.decay();
        let forgetting = matches!(&fit, Ok(f) if f.is_clean_decay()) && decay.decreasing;
        Self {
            seed: trace.seed,
            fit_error: fit.as_ref().err().map(|e| e.to_string()),
            fit: fit.ok(),
            fit_direct: fit_log_linear(&trace.gap_v_direct, burn, DIRECT_GAP_FLOOR).ok(),
            decay,
            forgetting,
            qualifying_steps: trace.qualifies.iter().filter(|&&q| q).count(),
            first_qualifying: trace.first_qualifying(),
            forget_bound_ok: trace.forget_violations().is_empty(),
            echeck_bound_ok: trace.echeck_violations().is_empty(),
            tail_diag_max: trace.tail_diag_max,
            accepted: trace.accepted(),
            gamma_hat: trace.env.gamma_hat,
            l_hat: trace.env.l_hat,
            constants: trace.constants.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub name: Option<String>,
    pub model: ModelSpec,
    pub weight: WeightSpec,
    pub scenario: Scenario,
    pub grid: GridConfig,
    pub n: usize,
    pub burn: usize,
    pub ybar: Interval,
    pub d_under: f64,
    #[serde(rename = "D")]
    pub d_set: Interval,
    pub seeds: Vec<SeedSummary>,
    pub all_accepted: bool,
    pub all_forgetting: bool,
    pub all_bounds_hold: bool,
    pub divergence: Option<DivergenceReport>,
}

impl ExperimentSummary {
    pub fn new(cfg: &ExperimentConfig, exp: &Experiment, traces: &[StabilityTrace]) -> Result<Self> {
        let seeds: Vec<SeedSummary> = traces.iter().map(|t| SeedSummary::new(t, cfg.experiment.burn)).collect();
        let divergence = match cfg.divergence {
            Some(p) => Some(divergence_report(p.alpha, p.c, p.rmax, 20, p.x)?),
            None => None,
        };
        Ok(Self {
            name: cfg.name.clone(),
            model: cfg.model,
            weight: cfg.weight,
            scenario: cfg.experiment.scenario,
            grid: cfg.grid,
            n: cfg.experiment.n,
            burn: cfg.experiment.burn,
            ybar: exp.ybar,
            d_under: exp.profile.d_under,
            d_set: exp.profile.d_set,
            all_accepted: seeds.iter().all(|s| s.accepted),
            all_forgetting: seeds.iter().all(|s| s.forgetting),
            all_bounds_hold: seeds.iter().all(|s| s.forget_bound_ok && s.echeck_bound_ok),
            seeds,
            divergence,
        })
    }
}

/// Runs a configured experiment and writes `seed_<seed>/trace.csv` for each
/// seed plus `summary.json` under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, parallel: bool) -> Result<ExperimentSummary> {
    let exp = Experiment::from_config(cfg)?;
    let traces = exp.run_seeds(&cfg.seeds(), parallel)?;
    std::fs::create_dir_all(out_dir)?;
    for t in &traces {
        let dir = out_dir.join(format!("seed_{}", t.seed));
        std::fs::create_dir_all(&dir)?;
        t.save_csv(&dir.join("trace.csv"))?;
    }
    let summary = ExperimentSummary::new(cfg, &exp, &traces)?;
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// `z^2 (c - 1) / 2 + alpha z x - alpha^2 x^2 / 2`, the log-integrand of the
/// prediction kernel's V-integral up to a constant.
fn divergence_exponent(alpha: f64, c: f64, x: f64, z: f64) -> f64 {
    0.5 * z * z * (c - 1.0) + alpha * z * x - 0.5 * alpha * alpha * x * x
}

/// `ln` of the integral of `exp(divergence_exponent)` over `[-R, R]` for each `R`.
pub fn ln_prediction_vnorm_divergence(alpha: f64, c: f64, radii: &[f64], x: f64) -> Result<Vec<f64>> {
    if radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::Domain("radii must be positive and finite".into()));
    }
    let phi = |z: f64| divergence_exponent(alpha, c, x, z);
    Ok(radii
        .iter()
        .map(|&r| {
            let mut s = phi(-r).max(phi(r));
            if c < 1.0 {
                let vertex = alpha * x / (1.0 - c);
                if vertex.abs() <= r {
                    s = s.max(phi(vertex));
                }
            }
            let panels = ((r * 4.0 * (1.0 + (c - 1.0).abs() * r)).ceil() as usize).max(8);
            s + crate::quad::integrate(-r, r, panels, |z| (phi(z) - s).exp()).ln()
        })
        .collect())
}

/// Truncated integrals at `x = 0`; entries overflow to `+inf` once the
/// integral exceeds the largest double.
pub fn prediction_vnorm_divergence(alpha: f64, c: f64, radii: &[f64]) -> Result<Vec<f64>> {
    Ok(ln_prediction_vnorm_divergence(alpha, c, radii, 0.0)?.into_iter().map(f64::exp).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceReport {
    pub alpha: f64,
    pub c: f64,
    pub x: f64,
    pub kappa: f64,
    pub radii: Vec<f64>,
    pub ln_values: Vec<f64>,
    pub strictly_increasing: bool,
    /// Smallest ladder radius whose truncated integral exceeds `1e8`.
    pub first_radius_above_1e8: Option<f64>,
    /// Variance of the stationary one-step prediction law.
    pub prediction_var: f64,
    /// Its V-moment in closed form.
    pub prediction_v_moment: f64,
}

/// Ladder `R = rmax i / steps`, `i = 1..=steps`, with the closed-form
/// V-moment of the stationary prediction law for comparison.
pub fn divergence_report(alpha: f64, c: f64, rmax: f64, steps: usize, x: f64) -> Result<DivergenceReport> {
    if steps == 0 {
        return Err(Error::Domain("divergence ladder needs at least one step".into()));
    }
    let radii: Vec<f64> = (1..=steps).map(|i| rmax * i as f64 / steps as f64).collect();
    let ln_values = ln_prediction_vnorm_divergence(alpha, c, &radii, x)?;
    let strictly_increasing = ln_values.windows(2).all(|w| w[1] > w[0]);
    let threshold = 1e8f64.ln();
    let first_radius_above_1e8 = radii.iter().zip(&ln_values).find(|(_, v)| **v > threshold).map(|(r, _)| *r);
    let pred = kalman_predict(stationary_pi(alpha)?, alpha);
    let v = WeightSpec::exp_square(c)?;
    Ok(DivergenceReport {
        alpha,
        c,
        x,
        kappa: kappa_general(alpha, c, 1.0),
        radii,
        ln_values,
        strictly_increasing,
        first_radius_above_1e8,
        prediction_var: pred.var,
        prediction_v_moment: gaussian_v_moment(pred, &v),
    })
}

/// V-moments of the exact prediction laws `N(m, P)` of the linear model along
/// `path`, starting from `prior` for `X_0`. Entry `k` is the law of `X_k`
/// given `Y_0..Y_{k-1}`.
pub fn prediction_v_moments(
    alpha: f64,
    beta_obs: f64,
    prior: GaussianState,
    path: &ObservationPath,
    v: &WeightSpec,
) -> Vec<f64> {
    let mut pred = prior;
    let mut out = Vec::with_capacity(path.len() + 1);
    out.push(gaussian_v_moment(pred, v));
    for &y in &path.y {
        let (post, _) = kalman_update(pred, y, beta_obs);
        pred = kalman_predict(post, alpha);
        out.push(gaussian_v_moment(pred, v));
    }
    out
}
