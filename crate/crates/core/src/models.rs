//! Hidden Markov models on the real line and the kernels they induce along an
//! observation path.
//!
//! Signal: `X_{k+1} = X_k + b(X_k) + sigma * V_k` (linear model: `alpha * X_k + V_k`).
//! Observation: `Y_k = h(X_k) + beta_obs * W_k` (linear model: `h(x) = x`).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::{Grid, GridMeasure, KernelGrid};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Burn-in length used to approximate a stationary start for nonlinear models.
pub const BURN_IN: usize = 10_000;

/// Drift term `b` of the nonlinear signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftFn {
    /// `b(x) = k x`
    Linear { k: f64 },
    /// `b(x) = k x + amplitude * sin(frequency * x)`
    LinearSine { k: f64, amplitude: f64, frequency: f64 },
}

impl DriftFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            DriftFn::Linear { k } => k * x,
            DriftFn::LinearSine { k, amplitude, frequency } => k * x + amplitude * (frequency * x).sin(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            DriftFn::Linear { k } => k.is_finite(),
            DriftFn::LinearSine { k, amplitude, frequency } => {
                k.is_finite() && amplitude.is_finite() && frequency.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain("drift parameters must be finite".into()))
        }
    }
}

/// Observation function `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsFn {
    /// `h(x) = k x`
    Linear { k: f64 },
    /// `h(x) = value`
    Constant { value: f64 },
    /// `h(x) = amplitude * sin(frequency * x)`
    Sine { amplitude: f64, frequency: f64 },
    /// `h(x) = exp(rate * x)`
    Exponential { rate: f64 },
}

impl ObsFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ObsFn::Linear { k } => k * x,
            ObsFn::Constant { value } => value,
            ObsFn::Sine { amplitude, frequency } => amplitude * (frequency * x).sin(),
            ObsFn::Exponential { rate } => (rate * x).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ObsFn::Linear { k } => k.is_finite(),
            ObsFn::Constant { value } => value.is_finite(),
            ObsFn::Sine { amplitude, frequency } => amplitude.is_finite() && frequency.is_finite(),
            ObsFn::Exponential { rate } => rate.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain("observation function parameters must be finite".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Linear { alpha: f64 },
    Nonlinear { drift: DriftFn, sigma: f64, obs: ObsFn },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub beta_obs: f64,
}

impl ModelSpec {
    pub fn linear(alpha: f64, beta_obs: f64) -> Result<Self> {
        Self { kind: ModelKind::Linear { alpha }, beta_obs }.validated()
    }

    pub fn nonlinear(drift: DriftFn, sigma: f64, obs: ObsFn, beta_obs: f64) -> Result<Self> {
        Self { kind: ModelKind::Nonlinear { drift, sigma, obs }, beta_obs }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.beta_obs > 0.0 && self.beta_obs.is_finite()) {
            return Err(Error::Domain(format!("beta_obs must be positive, got {}", self.beta_obs)));
        }
        match self.kind {
            ModelKind::Linear { alpha } => {
                if !(alpha.abs() < 1.0) {
                    return Err(Error::Domain(format!("linear model needs |alpha| < 1, got {alpha}")));
                }
            }
            ModelKind::Nonlinear { drift, sigma, obs } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
                }
                drift.validate()?;
                obs.validate()?;
            }
        }
        Ok(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<Self>(s)?.validated()
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str::<Self>(s)?.validated()
    }

    /// Reads a model from a `.json` or `.toml` file. A TOML file may hold the
    /// model at top level or under a `[model]` table.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
            || text.trim_start().starts_with('{');
        if is_json {
            return Self::from_json(&text);
        }
        #[derive(Deserialize)]
        struct Wrapped {
            model: ModelSpec,
        }
        match toml::from_str::<Wrapped>(&text) {
            Ok(w) => w.model.validated(),
            Err(_) => Self::from_toml(&text),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    /// Conditional mean of `X_{k+1}` given `X_k = x`.
    pub fn signal_mean(&self, x: f64) -> f64 {
        match self.kind {
            ModelKind::Linear { alpha } => alpha * x,
            ModelKind::Nonlinear { drift, .. } => x + drift.eval(x),
        }
    }

    pub fn sigma(&self) -> f64 {
        match self.kind {
            ModelKind::Linear { .. } => 1.0,
            ModelKind::Nonlinear { sigma, .. } => sigma,
        }
    }

    pub fn h(&self, x: f64) -> f64 {
        match self.kind {
            ModelKind::Linear { .. } => x,
            ModelKind::Nonlinear { obs, .. } => obs.eval(x),
        }
    }

    /// `sup_{x,y} g(x, y) = (2 pi beta_obs^2)^{-1/2}`.
    pub fn sup_obs_density(&self) -> f64 {
        self.ln_sup_obs_density().exp()
    }

    pub fn ln_sup_obs_density(&self) -> f64 {
        -LN_SQRT_2PI - self.beta_obs.ln()
    }
}

pub fn ln_transition_density(model: &ModelSpec, x: f64, x_next: f64) -> f64 {
    let s = model.sigma();
    let z = (x_next - model.signal_mean(x)) / s;
    -0.5 * z * z - LN_SQRT_2PI - s.ln()
}

/// Gaussian transition density `f(x, x')`.
pub fn transition_density(model: &ModelSpec, x: f64, x_next: f64) -> f64 {
    ln_transition_density(model, x, x_next).exp()
}

pub fn ln_obs_density(model: &ModelSpec, x: f64, y: f64) -> f64 {
    let z = (y - model.h(x)) / model.beta_obs;
    -0.5 * z * z + model.ln_sup_obs_density()
}

/// Normalized Gaussian observation density `g(x, y)`.
pub fn obs_density(model: &ModelSpec, x: f64, y: f64) -> f64 {
    ln_obs_density(model, x, y).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// `nu ∝ g(., Y_0) lambda`, `Q(x, dx') = f(x, dx') g(x', Y_{k+1})`.
    Filter,
    /// `nu = lambda`, `Q(x, dx') = g(x, Y_k) f(x, dx')`.
    Prediction,
}

impl Scenario {
    /// Observation consumed by the kernel applied at step `k` (`k -> k+1`).
    pub fn obs_index(&self, k: usize) -> usize {
        match self {
            Scenario::Filter => k + 1,
            Scenario::Prediction => k,
        }
    }

    /// Observations needed to run `n` steps.
    pub fn required_len(&self, n: usize) -> usize {
        match self {
            Scenario::Filter => n + 1,
            Scenario::Prediction => n.max(1),
        }
    }

    /// Picks the observation this scenario's kernel reads.
    pub fn select(&self, y_now: f64, y_next: f64) -> f64 {
        match self {
            Scenario::Filter => y_next,
            Scenario::Prediction => y_now,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Filter => "filter",
            Scenario::Prediction => "prediction",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "filter" => Ok(Scenario::Filter),
            "prediction" => Ok(Scenario::Prediction),
            other => Err(Error::Parse(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Simulated,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub y: Vec<f64>,
    pub seed: Option<u64>,
    pub origin: Origin,
    pub model: Option<ModelSpec>,
}

impl ObservationPath {
    pub fn external(y: Vec<f64>) -> Result<Self> {
        if let Some(k) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("observation {k} is not finite")));
        }
        Ok(Self { y, seed: None, origin: Origin::External, model: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if let Some(model) = &self.model {
            writeln!(out, "# model: {}", model.to_json())?;
        }
        if let Some(seed) = self.seed {
            writeln!(out, "# seed: {seed}")?;
        }
        writeln!(out, "k,y")?;
        for (k, y) in self.y.iter().enumerate() {
            writeln!(out, "{k},{}", crate::fmt_f64(*y))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file)
    }

    /// Reads `k,y` rows; `# model:` and `# seed:` comment lines are honoured.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut seed = None;
        let mut model = None;
        let mut body = String::new();
        for line in input.lines() {
            let line = line?;
            let trimmed = line.trim();
            if let Some(comment) = trimmed.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(s) = comment.strip_prefix("seed:") {
                    seed = Some(s.trim().parse().map_err(|e| Error::Parse(format!("seed: {e}")))?);
                } else if let Some(m) = comment.strip_prefix("model:") {
                    model = Some(ModelSpec::from_json(m.trim())?);
                }
                continue;
            }
            body.push_str(&line);
            body.push('\n');
        }
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        let mut y = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let k: usize = rec
                .get(0)
                .ok_or_else(|| Error::Parse(format!("row {row}: missing k")))?
                .parse()
                .map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
            if k != row {
                return Err(Error::Parse(format!("row {row}: expected k = {row}, found {k}")));
            }
            let v: f64 = rec
                .get(1)
                .ok_or_else(|| Error::Parse(format!("row {row}: missing y")))?
                .parse()
                .map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
            y.push(v);
        }
        let mut path = Self::external(y)?;
        path.seed = seed;
        path.model = model;
        if seed.is_some() && model.is_some() {
            path.origin = Origin::Simulated;
        }
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_csv(file)
    }
}

/// Simulates `n` observations `Y_0..Y_{n-1}` and the matching states, with
/// `X_0` drawn from (an approximation of) the stationary law.
pub fn simulate(model: &ModelSpec, n: usize, seed: u64) -> Result<(Vec<f64>, ObservationPath)> {
    if n == 0 {
        return Err(Error::Domain("simulate needs n >= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sigma = model.sigma();
    let mut x = match model.kind {
        ModelKind::Linear { alpha } => {
            let z: f64 = rng.sample(StandardNormal);
            z / (1.0 - alpha * alpha).sqrt()
        }
        ModelKind::Nonlinear { .. } => {
            let mut x = 0.0;
            for _ in 0..BURN_IN {
                let v: f64 = rng.sample(StandardNormal);
                x = model.signal_mean(x) + sigma * v;
            }
            x
        }
    };
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(model.h(x) + model.beta_obs * w);
        let v: f64 = rng.sample(StandardNormal);
        x = model.signal_mean(x) + sigma * v;
    }
    if let Some(k) = ys.iter().position(|y| !y.is_finite()) {
        return Err(Error::Domain(format!("simulated observation {k} is not finite")));
    }
    let path = ObservationPath { y: ys, seed: Some(seed), origin: Origin::Simulated, model: Some(*model) };
    Ok((xs, path))
}

/// Standard deviation of the stationary observation law. Closed form for the
/// linear model; otherwise estimated from a long simulated path.
pub fn observation_sd(model: &ModelSpec, seed: u64) -> Result<f64> {
    match model.kind {
        ModelKind::Linear { alpha } => Ok((1.0 / (1.0 - alpha * alpha) + model.beta_obs.powi(2)).sqrt()),
        ModelKind::Nonlinear { .. } => {
            let (_, path) = simulate(model, 100_000, seed)?;
            let n = path.len() as f64;
            let mean = path.y.iter().sum::<f64>() / n;
            let var = path.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(var.sqrt())
        }
    }
}

/// Observation-independent part of the kernel: `F_ij = f(x_i, x_j) * width_j`.
/// Built once per (model, grid) and shared by every step.
#[derive(Debug, Clone)]
pub struct Transition {
    model: ModelSpec,
    kernel: Arc<KernelGrid>,
}

impl Transition {
    pub fn new(model: &ModelSpec, grid: &Grid) -> Result<Self> {
        let m = *model;
        let kernel = KernelGrid::from_fn(grid.clone(), grid.clone(), move |x, xn| transition_density(&m, x, xn))?;
        Ok(Self { model: *model, kernel: Arc::new(kernel) })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn grid(&self) -> &Grid {
        self.kernel.source()
    }

    pub fn kernel(&self) -> &KernelGrid {
        &self.kernel
    }

    /// `g(x_i, y)` at every node.
    pub fn obs_weights(&self, y: f64) -> Vec<f64> {
        self.grid().nodes().iter().map(|&x| obs_density(&self.model, x, y)).collect()
    }

    /// Kernel of `scenario` reading observation `y` (already selected).
    pub fn scenario_kernel(&self, scenario: Scenario, y: f64) -> ScenarioKernel<'_> {
        ScenarioKernel { transition: self, scenario, g: self.obs_weights(y) }
    }
}

/// `Q` for one step as the shared transition plus a diagonal observation
/// factor, applied in `O(N^2)` without materializing the product.
#[derive(Debug, Clone)]
pub struct ScenarioKernel<'a> {
    transition: &'a Transition,
    scenario: Scenario,
    g: Vec<f64>,
}

impl ScenarioKernel<'_> {
    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn transition(&self) -> &Transition {
        self.transition
    }

    /// Unnormalized `m Q` as raw weights.
    pub fn push_weights(&self, w: &[f64]) -> Vec<f64> {
        let f = self.transition.kernel();
        let n = f.target().len();
        match self.scenario {
            Scenario::Filter => {
                let mut out = linalg::vec_mat(w, f.density(), n);
                out.iter_mut().zip(&self.g).for_each(|(o, g)| *o *= g);
                out
            }
            Scenario::Prediction => {
                let wg: Vec<f64> = w.iter().zip(&self.g).map(|(a, b)| a * b).collect();
                linalg::vec_mat(&wg, f.density(), n)
            }
        }
    }

    /// [`Self::push_weights`] for several measures, reading the transition
    /// matrix once.
    pub fn push_weights_many(&self, ws: &[&[f64]]) -> Vec<Vec<f64>> {
        let f = self.transition.kernel();
        let n = f.target().len();
        match self.scenario {
            Scenario::Filter => {
                let mut outs = linalg::vec_mat_many(ws, f.density(), n);
                for out in &mut outs {
                    out.iter_mut().zip(&self.g).for_each(|(o, g)| *o *= g);
                }
                outs
            }
            Scenario::Prediction => {
                let wgs: Vec<Vec<f64>> =
                    ws.iter().map(|w| w.iter().zip(&self.g).map(|(a, b)| a * b).collect()).collect();
                let refs: Vec<&[f64]> = wgs.iter().map(|v| v.as_slice()).collect();
                linalg::vec_mat_many(&refs, f.density(), n)
            }
        }
    }

    /// `Q phi` at the nodes.
    pub fn apply_to_function(&self, phi: &[f64]) -> Vec<f64> {
        let f = self.transition.kernel();
        let rows = f.source().len();
        match self.scenario {
            Scenario::Filter => {
                let gphi: Vec<f64> = phi.iter().zip(&self.g).map(|(a, b)| a * b).collect();
                linalg::mat_vec(f.density(), &gphi, rows)
            }
            Scenario::Prediction => {
                let mut out = linalg::mat_vec(f.density(), phi, rows);
                out.iter_mut().zip(&self.g).for_each(|(o, g)| *o *= g);
                out
            }
        }
    }

    /// Row sums `Q(x_i, X)`.
    pub fn row_sums(&self) -> Vec<f64> {
        self.apply_to_function(&vec![1.0; self.g.len()])
    }

    pub fn to_dense(&self) -> KernelGrid {
        let f = self.transition.kernel();
        let n = f.target().len();
        let mut density = f.density().to_vec();
        for (i, row) in density.chunks_mut(n).enumerate() {
            match self.scenario {
                Scenario::Filter => row.iter_mut().zip(&self.g).for_each(|(d, g)| *d *= g),
                Scenario::Prediction => row.iter_mut().for_each(|d| *d *= self.g[i]),
            }
        }
        KernelGrid::from_parts_unchecked(f.source().clone(), f.target().clone(), density)
    }
}

/// Dense random-environment kernel for one step. The scenario picks which of
/// `y_now` / `y_next` it reads.
pub fn q_kernel(model: &ModelSpec, scenario: Scenario, y_now: f64, y_next: f64, grid: &Grid) -> Result<KernelGrid> {
    let t = Transition::new(model, grid)?;
    Ok(t.scenario_kernel(scenario, scenario.select(y_now, y_next)).to_dense())
}

/// Markov transition restricted to the grid, as a kernel.
pub fn transition_kernel(model: &ModelSpec, grid: &Grid) -> Result<KernelGrid> {
    Ok(Transition::new(model, grid)?.kernel().clone())
}

/// `g(., y) m` without normalization.
pub fn reweight_by_obs(m: &GridMeasure, model: &ModelSpec, y: f64) -> GridMeasure {
    let g: Vec<f64> = m.nodes().iter().map(|&x| obs_density(model, x, y)).collect();
    m.reweighted(&g).expect("same length")
}
