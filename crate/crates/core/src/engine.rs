//! The normalized kernel recursion `eta_{k+1} = eta_k Q_k / eta_k Q_k(X)` on a
//! grid, paired runs for stability studies, and the backward `h`/`S`
//! decomposition of a run.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::measure::{normalize, tail_diagnostic, vnorm, Grid, GridMeasure, WeightSpec};
use crate::models::{ModelSpec, ObservationPath, Scenario, ScenarioKernel, Transition};

/// Trace of one filter run: `eta_0..eta_n` and `lambda_0..lambda_{n-1}`.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub scenario: Scenario,
    pub etas: Vec<GridMeasure>,
    pub lambdas: Vec<f64>,
    pub v_moments: Vec<f64>,
    pub tail_diag: Vec<f64>,
}

impl FilterRun {
    pub fn steps(&self) -> usize {
        self.lambdas.len()
    }

    /// `sum_k ln lambda_k = ln nu Q_n(X)`.
    pub fn log_normalizer(&self) -> f64 {
        self.lambdas.iter().map(|l| l.ln()).sum()
    }

    pub fn max_tail_diag(&self) -> f64 {
        self.tail_diag.iter().copied().fold(0.0, f64::max)
    }

    /// CSV with columns `k,lambda_k,v_moment_k,tail_diag_k`; `lambda` is
    /// empty on the final row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,lambda_k,v_moment_k,tail_diag_k")?;
        for k in 0..self.etas.len() {
            let lambda = self.lambdas.get(k).map(|l| fmt_f64(*l)).unwrap_or_default();
            writeln!(
                out,
                "{k},{lambda},{},{}",
                fmt_f64(self.v_moments[k]),
                fmt_f64(self.tail_diag[k])
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Binary dump: node count and measure count as little-endian `u64`,
    /// then the nodes, then the weights of each `eta_k`, all little-endian `f64`.
    pub fn write_density_sidecar<W: Write>(&self, mut out: W) -> Result<()> {
        let nodes = self.etas[0].nodes();
        out.write_all(&(nodes.len() as u64).to_le_bytes())?;
        out.write_all(&(self.etas.len() as u64).to_le_bytes())?;
        for x in nodes {
            out.write_all(&x.to_le_bytes())?;
        }
        for eta in &self.etas {
            for w in eta.weights() {
                out.write_all(&w.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_density_sidecar(&self, path: &Path) -> Result<()> {
        self.write_density_sidecar(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Reads a sidecar written by [`FilterRun::write_density_sidecar`] back into
/// `(nodes, weights per step)`.
pub fn read_density_sidecar(bytes: &[u8]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let bad = || Error::Parse("truncated density sidecar".into());
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes.get(8 * i..8 * i + 8).and_then(|b| b.try_into().ok()).ok_or_else(bad)
    };
    let n = u64::from_le_bytes(word(0)?) as usize;
    let m = u64::from_le_bytes(word(1)?) as usize;
    if bytes.len() != 8 * (2 + n + n * m) {
        return Err(bad());
    }
    let f = |i: usize| f64::from_le_bytes(word(i).expect("length checked"));
    let nodes = (0..n).map(|i| f(2 + i)).collect();
    let weights = (0..m).map(|k| (0..n).map(|i| f(2 + n + k * n + i)).collect()).collect();
    Ok((nodes, weights))
}

/// Two runs on the same path. `gap_v` comes from propagating the difference
/// directly, which keeps full relative precision as the gap shrinks;
/// `gap_v_direct` subtracts the two filters and bottoms out near machine
/// precision times `eta(V)`.
#[derive(Debug, Clone)]
pub struct PairRun {
    pub run: FilterRun,
    pub run_tilde: FilterRun,
    pub gap_v: Vec<f64>,
    pub gap_v_direct: Vec<f64>,
}

/// Model, scenario and grid with the observation-independent part of the
/// kernel precomputed.
#[derive(Debug, Clone)]
pub struct Engine {
    scenario: Scenario,
    transition: Transition,
    weight: WeightSpec,
}

impl Engine {
    pub fn new(model: &ModelSpec, scenario: Scenario, grid: &Grid, weight: WeightSpec) -> Result<Self> {
        Ok(Self { scenario, transition: Transition::new(model, grid)?, weight })
    }

    pub fn model(&self) -> &ModelSpec {
        self.transition.model()
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn grid(&self) -> &Grid {
        self.transition.grid()
    }

    pub fn weight(&self) -> &WeightSpec {
        &self.weight
    }

    pub fn transition(&self) -> &Transition {
        &self.transition
    }

    /// Kernel `Q` of step `k` (`eta_k -> eta_{k+1}`) along `path`.
    pub fn kernel_at(&self, path: &ObservationPath, k: usize) -> Result<ScenarioKernel<'_>> {
        let idx = self.scenario.obs_index(k);
        let y = *path.y.get(idx).ok_or(Error::PathTooShort { needed: idx + 1, have: path.len() })?;
        Ok(self.transition.scenario_kernel(self.scenario, y))
    }

    /// `nu` from `lambda0`: reweighted by `g(., y0)` for the filter scenario.
    pub fn initial(&self, lambda0: &GridMeasure, y0: f64) -> Result<GridMeasure> {
        if !lambda0.grid().same_as(self.grid()) {
            return Err(Error::GridMismatch("initial measure is not on the engine grid".into()));
        }
        match self.scenario {
            Scenario::Prediction => Ok(lambda0.clone()),
            Scenario::Filter => {
                let g = self.transition.obs_weights(y0);
                let (m, _) = normalize(&lambda0.reweighted(&g)?).map_err(|_| Error::ZeroMass { step: Some(0) })?;
                Ok(m)
            }
        }
    }

    /// One normalized step through `q`; returns `(eta, lambda)`.
    pub fn step_with(&self, eta: &GridMeasure, q: &ScenarioKernel<'_>) -> Result<(GridMeasure, f64)> {
        let pushed = q.push_weights(eta.weights());
        let m = GridMeasure::from_parts_unchecked(self.grid().clone(), pushed);
        normalize(&m)
    }

    pub fn step(&self, eta: &GridMeasure, y_now: f64, y_next: f64) -> Result<(GridMeasure, f64)> {
        let q = self.transition.scenario_kernel(self.scenario, self.scenario.select(y_now, y_next));
        self.step_with(eta, &q)
    }

    /// Largest number of steps `path` supports.
    pub fn max_steps(&self, path: &ObservationPath) -> usize {
        match self.scenario {
            Scenario::Filter => path.len().saturating_sub(1),
            Scenario::Prediction => path.len(),
        }
    }

    fn check_len(&self, path: &ObservationPath, n: usize) -> Result<()> {
        let needed = self.scenario.required_len(n);
        if path.len() < needed {
            return Err(Error::PathTooShort { needed, have: path.len() });
        }
        Ok(())
    }

    fn record(&self, run: &mut FilterRun, eta: GridMeasure) {
        run.v_moments.push(vnorm(&eta, &self.weight));
        run.tail_diag.push(tail_diagnostic(&eta, &self.weight));
        run.etas.push(eta);
    }

    fn empty_run(&self, n: usize) -> FilterRun {
        FilterRun {
            scenario: self.scenario,
            etas: Vec::with_capacity(n + 1),
            lambdas: Vec::with_capacity(n),
            v_moments: Vec::with_capacity(n + 1),
            tail_diag: Vec::with_capacity(n + 1),
        }
    }

    pub fn run(&self, lambda0: &GridMeasure, path: &ObservationPath, n: usize) -> Result<FilterRun> {
        self.check_len(path, n)?;
        let nu = self.initial(lambda0, path.y[0])?;
        let mut run = self.empty_run(n);
        self.record(&mut run, nu);
        for k in 0..n {
            let q = self.kernel_at(path, k)?;
            let (eta, lambda) = self
                .step_with(&run.etas[k], &q)
                .map_err(|_| Error::ZeroMass { step: Some(k + 1) })?;
            run.lambdas.push(lambda);
            self.record(&mut run, eta);
        }
        Ok(run)
    }

    /// Both runs plus the gap, advancing the two filters and the difference
    /// together so each step reads the transition matrix once. The runs equal
    /// those of [`Engine::run`] exactly.
    pub fn run_pair(
        &self,
        lambda0: &GridMeasure,
        lambda0_tilde: &GridMeasure,
        path: &ObservationPath,
        n: usize,
    ) -> Result<PairRun> {
        self.check_len(path, n)?;
        let mut run = self.empty_run(n);
        let mut run_tilde = self.empty_run(n);
        self.record(&mut run, self.initial(lambda0, path.y[0])?);
        self.record(&mut run_tilde, self.initial(lambda0_tilde, path.y[0])?);
        let mut delta = run.etas[0].sub(&run_tilde.etas[0])?.into_weights();
        let mut gap_v = Vec::with_capacity(n + 1);
        let mut gap_v_direct = Vec::with_capacity(n + 1);
        let norm = |w: &[f64]| vnorm(&GridMeasure::from_parts_unchecked(self.grid().clone(), w.to_vec()), &self.weight);
        gap_v.push(norm(&delta));
        gap_v_direct.push(gap_v[0]);
        let zero_mass = |k: usize| move |_| Error::ZeroMass { step: Some(k + 1) };
        for k in 0..n {
            let q = self.kernel_at(path, k)?;
            let mut pushed =
                q.push_weights_many(&[run.etas[k].weights(), run_tilde.etas[k].weights(), &delta]).into_iter();
            let (a, b, d) = (pushed.next().unwrap(), pushed.next().unwrap(), pushed.next().unwrap());
            let (eta, lambda) = normalize(&GridMeasure::from_parts_unchecked(self.grid().clone(), a)).map_err(zero_mass(k))?;
            let (eta_t, lambda_t) =
                normalize(&GridMeasure::from_parts_unchecked(self.grid().clone(), b)).map_err(zero_mass(k))?;
            run.lambdas.push(lambda);
            run_tilde.lambdas.push(lambda_t);
            self.record(&mut run, eta);
            self.record(&mut run_tilde, eta_t);
            // delta_{k+1} = [delta_k Q - delta_k(G) eta~_{k+1}] / lambda_k
            let mass: f64 = d.iter().sum();
            let target = run_tilde.etas[k + 1].weights();
            delta = d.iter().zip(target).map(|(u, t)| (u - mass * t) / lambda).collect();
            gap_v.push(norm(&delta));
            let direct = run.etas[k + 1].sub(&run_tilde.etas[k + 1])?;
            gap_v_direct.push(vnorm(&direct, &self.weight));
        }
        Ok(PairRun { run, run_tilde, gap_v, gap_v_direct })
    }
}

/// `nu` for a scenario, building a throwaway engine.
pub fn initial_measure(model: &ModelSpec, scenario: Scenario, lambda0: &GridMeasure, y0: f64) -> Result<GridMeasure> {
    let unit = WeightSpec::exp_abs(1.0)?;
    Engine::new(model, scenario, lambda0.grid(), unit)?.initial(lambda0, y0)
}

/// One step of the recursion. Builds the transition matrix on every call; use
/// [`Engine`] for repeated steps.
pub fn step(
    eta_prev: &GridMeasure,
    model: &ModelSpec,
    scenario: Scenario,
    y_now: f64,
    y_next: f64,
) -> Result<(GridMeasure, f64)> {
    let unit = WeightSpec::exp_abs(1.0)?;
    Engine::new(model, scenario, eta_prev.grid(), unit)?.step(eta_prev, y_now, y_next)
}

/// Runs every step `path` supports.
pub fn run(
    model: &ModelSpec,
    scenario: Scenario,
    lambda0: &GridMeasure,
    path: &ObservationPath,
    v: &WeightSpec,
) -> Result<FilterRun> {
    let engine = Engine::new(model, scenario, lambda0.grid(), *v)?;
    let n = engine.max_steps(path);
    engine.run(lambda0, path, n)
}

/// Backward functions `h_{k,n}` (held as logarithms), the row sums of the
/// `S_{k,n}` kernels, and the forward reconstruction of `eta_n` through them.
#[derive(Debug, Clone)]
pub struct SDecomposition {
    pub n: usize,
    /// `ln h_{k,n}` at the nodes for `k = 0..=n`.
    pub ln_h: Vec<Vec<f64>>,
    /// Row sums of `S_{k,n}` for `k = 1..=n` (index `k - 1`).
    pub s_rowsums: Vec<Vec<f64>>,
    pub reconstruction: GridMeasure,
    /// `nu(h_{0,n})`
    pub nu_h0: f64,
    pub run: FilterRun,
}

impl SDecomposition {
    pub fn h(&self, k: usize) -> Vec<f64> {
        self.ln_h[k].iter().map(|l| l.exp()).collect()
    }

    /// `sup_x |h_{k,n}(x)| / V(x)` over the grid.
    pub fn h_vnorm(&self, k: usize, v: &WeightSpec) -> f64 {
        let nodes = self.run.etas[0].nodes();
        self.ln_h[k]
            .iter()
            .zip(nodes)
            .map(|(l, &x)| (l - v.ln_eval(x)).exp())
            .fold(0.0, f64::max)
    }

    pub fn max_rowsum_error(&self) -> f64 {
        self.s_rowsums
            .iter()
            .flatten()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `ln(Q phi)` at each node from `ln phi`, computed row by row in log space.
fn ln_apply(ln_f: &[f64], ln_g: &[f64], scenario: Scenario, ln_phi: &[f64]) -> Vec<f64> {
    use rayon::prelude::*;
    let n = ln_phi.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &ln_f[i * n..(i + 1) * n];
            match scenario {
                Scenario::Filter => log_sum_exp(row.iter().zip(ln_g).zip(ln_phi).map(|((f, g), p)| f + g + p)),
                Scenario::Prediction => ln_g[i] + log_sum_exp(row.iter().zip(ln_phi).map(|(f, p)| f + p)),
            }
        })
        .collect()
}

/// Decomposes an `n`-step run from `lambda0` along `path` into the backward
/// functions `h_{k,n}` and the Markov kernels `S_{k,n}`.
pub fn s_decompose(
    model: &ModelSpec,
    scenario: Scenario,
    path: &ObservationPath,
    n: usize,
    lambda0: &GridMeasure,
    v: &WeightSpec,
) -> Result<SDecomposition> {
    if n == 0 {
        return Err(Error::Domain("decomposition needs n >= 1".into()));
    }
    let engine = Engine::new(model, scenario, lambda0.grid(), *v)?;
    let run = engine.run(lambda0, path, n)?;
    let ln_f: Vec<f64> = engine.transition().kernel().density().iter().map(|d| d.ln()).collect();
    let ln_gs: Vec<Vec<f64>> = (0..n)
        .map(|k| engine.kernel_at(path, k).map(|q| q.g().iter().map(|g| g.ln()).collect()))
        .collect::<Result<_>>()?;
    let size = engine.grid().len();

    let mut ln_h = vec![vec![0.0; size]; n + 1];
    for k in (0..n).rev() {
        let ln_lambda = run.lambdas[k].ln();
        ln_h[k] = ln_apply(&ln_f, &ln_gs[k], scenario, &ln_h[k + 1])
            .into_iter()
            .map(|l| l - ln_lambda)
            .collect();
    }

    // S_{k,n}(x_i, .) = Q_{k-1}(x_i, .) h_k / (lambda_{k-1} h_{k-1}(x_i))
    let mut s_rowsums = Vec::with_capacity(n);
    for k in 1..=n {
        let q = ln_apply(&ln_f, &ln_gs[k - 1], scenario, &ln_h[k]);
        let ln_lambda = run.lambdas[k - 1].ln();
        s_rowsums.push(
            q.iter()
                .zip(&ln_h[k - 1])
                .map(|(a, b)| (a - ln_lambda - b).exp())
                .collect(),
        );
    }

    let nu = &run.etas[0];
    let mut mu: Vec<f64> = nu
        .weights()
        .iter()
        .zip(&ln_h[0])
        .map(|(w, l)| if *w == 0.0 { 0.0 } else { w * l.exp() })
        .collect();
    let nu_h0: f64 = mu.iter().sum();
    for k in 1..=n {
        let q = engine.kernel_at(path, k - 1)?;
        let scaled: Vec<f64> = mu
            .iter()
            .zip(&ln_h[k - 1])
            .map(|(m, l)| if *m == 0.0 { 0.0 } else { m * (-l).exp() })
            .collect();
        let ln_lambda = run.lambdas[k - 1].ln();
        mu = q
            .push_weights(&scaled)
            .iter()
            .zip(&ln_h[k])
            .map(|(p, l)| if *p == 0.0 { 0.0 } else { p * (l - ln_lambda).exp() })
            .collect();
    }
    let reconstruction = GridMeasure::new(engine.grid().clone(), mu)?;
    Ok(SDecomposition { n, ln_h, s_rowsums, reconstruction, nu_h0, run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{gaussian_v_moment, kalman_step, kalman_update, GaussianState};
    use crate::measure::{integrate, KernelGrid};
    use crate::models::{simulate, DriftFn, ObsFn};
    use approx::assert_relative_eq;

    fn grid() -> Grid {
        Grid::symmetric(12.0, 1200).unwrap()
    }

    fn abs1() -> WeightSpec {
        WeightSpec::exp_abs(1.0).unwrap()
    }

    #[test]
    fn initial_measure_examples() {
        let g = grid();
        let lam = GridMeasure::gaussian(g.clone(), 0.0, 1.0).unwrap();
        let lin = ModelSpec::linear(0.5, 1.0).unwrap();
        let pred = initial_measure(&lin, Scenario::Prediction, &lam, 2.0).unwrap();
        assert_eq!(pred.weights(), lam.weights());

        let flat = ModelSpec::nonlinear(DriftFn::Linear { k: -0.5 }, 1.0, ObsFn::Constant { value: 0.0 }, 1.0).unwrap();
        let same = initial_measure(&flat, Scenario::Filter, &lam, 1.3).unwrap();
        for (a, b) in same.weights().iter().zip(lam.weights()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }

        let post = initial_measure(&lin, Scenario::Filter, &lam, 0.0).unwrap();
        assert!(post.mean().abs() < 1e-6);
        assert!((post.variance() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn step_examples() {
        let g = grid();
        let flat = ModelSpec::nonlinear(DriftFn::Linear { k: -0.5 }, 1.0, ObsFn::Constant { value: 0.0 }, 1.0).unwrap();
        let pi = GridMeasure::gaussian(g.clone(), 0.0, 4.0 / 3.0).unwrap();
        let (eta, _) = step(&pi, &flat, Scenario::Filter, 0.2, -0.4).unwrap();
        assert!(eta.mean().abs() < 1e-8);
        assert!((eta.variance() - 4.0 / 3.0).abs() < 1e-8);

        let lin = ModelSpec::linear(0.9, 1.0).unwrap();
        let prior = GridMeasure::gaussian(g.clone(), 0.5, 0.8).unwrap();
        let (eta, lambda) = step(&prior, &lin, Scenario::Filter, 0.0, 1.4).unwrap();
        let (kal, ll) = kalman_step(GaussianState::new(0.5, 0.8).unwrap(), 1.4, 0.9, 1.0);
        assert!((eta.mean() - kal.mean).abs() < 1e-6);
        assert!((eta.variance() - kal.var).abs() < 1e-6);
        assert!((lambda.ln() - ll).abs() < 1e-6);

        let dense = crate::models::q_kernel(&lin, Scenario::Filter, 0.0, 1.4, &g).unwrap();
        let rows = dense.row_sums();
        let expected: f64 = prior.weights().iter().zip(&rows).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lambda, expected, max_relative = 1e-12);
    }

    #[test]
    fn run_matches_kalman_and_exact_moments() {
        let alpha = 0.9;
        let lin = ModelSpec::linear(alpha, 1.0).unwrap();
        let (_, path) = simulate(&lin, 201, 5).unwrap();
        let g = grid();
        let lam = GridMeasure::gaussian(g.clone(), 0.0, 1.0 / (1.0 - alpha * alpha)).unwrap();
        let v = abs1();
        let out = run(&lin, Scenario::Filter, &lam, &path, &v).unwrap();
        assert_eq!(out.steps(), 200);

        let (mut s, _) = kalman_update(GaussianState::new(0.0, 1.0 / (1.0 - alpha * alpha)).unwrap(), path.y[0], 1.0);
        let mut ll = 0.0;
        for k in 0..=200 {
            if k > 0 {
                let (next, inc) = kalman_step(s, path.y[k], alpha, 1.0);
                s = next;
                ll += inc;
            }
            let eta = &out.etas[k];
            assert!((eta.mass() - 1.0).abs() < 1e-12);
            assert!((eta.mean() - s.mean).abs() <= 1e-6 * s.mean.abs().max(1.0));
            assert!((eta.variance() - s.var).abs() <= 1e-6 * s.var);
            assert_relative_eq!(out.v_moments[k], gaussian_v_moment(s, &v), max_relative = 1e-5);
        }
        assert!((out.log_normalizer() - ll).abs() < 1e-5);
        assert!(out.lambdas.iter().all(|&l| l > 0.0 && l.is_finite()));
    }

    #[test]
    fn zero_steps_and_determinism() {
        let lin = ModelSpec::linear(0.5, 1.0).unwrap();
        let (_, path) = simulate(&lin, 30, 1).unwrap();
        let g = Grid::symmetric(10.0, 400).unwrap();
        let lam = GridMeasure::gaussian(g.clone(), 0.0, 1.0).unwrap();
        let engine = Engine::new(&lin, Scenario::Filter, &g, abs1()).unwrap();
        let empty = engine.run(&lam, &path, 0).unwrap();
        assert_eq!(empty.etas.len(), 1);
        assert!(empty.lambdas.is_empty());

        let a = engine.run(&lam, &path, 29).unwrap();
        let b = engine.run(&lam, &path, 29).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert!(matches!(engine.run(&lam, &path, 30), Err(Error::PathTooShort { .. })));
    }

    #[test]
    fn far_observation_reports_zero_mass_step() {
        let lin = ModelSpec::linear(0.5, 0.01).unwrap();
        let g = Grid::symmetric(5.0, 200).unwrap();
        let lam = GridMeasure::gaussian(g.clone(), 0.0, 1.0).unwrap();
        let path = ObservationPath::external(vec![0.0, 0.1, 1e4]).unwrap();
        let err = run(&lin, Scenario::Filter, &lam, &path, &abs1()).unwrap_err();
        assert!(matches!(err, Error::ZeroMass { step: Some(2) }), "{err:?}");
    }

    #[test]
    fn prediction_is_pushed_filter() {
        let lin = ModelSpec::linear(0.5, 1.0).unwrap();
        let (_, path) = simulate(&lin, 12, 9).unwrap();
        let g = Grid::symmetric(14.0, 1400).unwrap();
        let lam = GridMeasure::gaussian(g.clone(), 0.3, 1.2).unwrap();
        let v = abs1();
        let filt = run(&lin, Scenario::Filter, &lam, &path, &v).unwrap();
        let pred = run(&lin, Scenario::Prediction, &lam, &path, &v).unwrap();
        let f = crate::models::transition_kernel(&lin, &g).unwrap();
        for n in 1..=10 {
            let pushed = crate::measure::apply_kernel(&filt.etas[n - 1], &f).unwrap();
            let (pushed, _) = normalize(&pushed).unwrap();
            let gap = vnorm(&pred.etas[n].sub(&pushed).unwrap(), &v);
            assert!(gap < 1e-8, "n = {n}: {gap}");
        }
    }

    #[test]
    fn recursion_equals_composed_kernel() {
        let m = ModelSpec::nonlinear(DriftFn::Linear { k: -0.5 }, 1.0, ObsFn::Linear { k: 1.0 }, 1.0).unwrap();
        let (_, path) = simulate(&m, 6, 4).unwrap();
        let g = Grid::symmetric(10.0, 300).unwrap();
        let lam = GridMeasure::gaussian(g.clone(), 1.0, 2.0).unwrap();
        let v = abs1();
        for sc in [Scenario::Filter, Scenario::Prediction] {
            let engine = Engine::new(&m, sc, &g, v).unwrap();
            let out = engine.run(&lam, &path, 5).unwrap();
            let mut composed = KernelGrid::identity(g.clone());
            for k in 0..5 {
                let q = engine.kernel_at(&path, k).unwrap().to_dense();
                composed = crate::measure::compose_kernels(&composed, &q).unwrap();
            }
            let direct = crate::measure::apply_kernel(&out.etas[0], &composed).unwrap();
            let prod: f64 = out.lambdas.iter().product();
            assert_relative_eq!(direct.mass(), prod, max_relative = 1e-10);
            let (direct, _) = normalize(&direct).unwrap();
            assert!(vnorm(&direct.sub(&out.etas[5]).unwrap(), &v) < 1e-8);
        }
    }

    #[test]
    fn pair_gap_recursion_tracks_direct_difference() {
        let lin = ModelSpec::linear(0.9, 1.0).unwrap();
        let (_, path) = simulate(&lin, 61, 2).unwrap();
        let g = grid();
        let v = abs1();
        let engine = Engine::new(&lin, Scenario::Filter, &g, v).unwrap();
        let a = GridMeasure::gaussian(g.clone(), 0.0, 1.0).unwrap();
        let b = GridMeasure::gaussian(g.clone(), 3.0, 2.0).unwrap();
        let pair = engine.run_pair(&a, &b, &path, 60).unwrap();
        assert_eq!(pair.gap_v[0], vnorm(&a_nu(&engine, &a, &path).sub(&a_nu(&engine, &b, &path)).unwrap(), &v));
        for n in 0..=60 {
            if pair.gap_v_direct[n] > 1e-9 {
                assert_relative_eq!(pair.gap_v[n], pair.gap_v_direct[n], max_relative = 1e-6);
            }
        }
        assert!(pair.gap_v[60] < 1e-3 * pair.gap_v[0]);

        let same = engine.run_pair(&a, &a, &path, 20).unwrap();
        assert!(same.gap_v.iter().all(|&x| x == 0.0));

        let single = engine.run(&b, &path, 60).unwrap();
        assert_eq!(single.lambdas, pair.run_tilde.lambdas);
        assert_eq!(single.etas.last().unwrap().weights(), pair.run_tilde.etas[60].weights());
    }

    fn a_nu(engine: &Engine, lam: &GridMeasure, path: &ObservationPath) -> GridMeasure {
        engine.initial(lam, path.y[0]).unwrap()
    }

    #[test]
    fn s_decomposition_identities() {
        let lin = ModelSpec::linear(0.9, 1.0).unwrap();
        let (_, path) = simulate(&lin, 11, 8).unwrap();
        let g = grid();
        let v = abs1();
        let lam = GridMeasure::gaussian(g.clone(), 0.0, 0.5).unwrap();
        let one = s_decompose(&lin, Scenario::Filter, &path, 1, &lam, &v).unwrap();
        assert!(one.ln_h[1].iter().all(|&l| l == 0.0));
        let q0 = Engine::new(&lin, Scenario::Filter, &g, v).unwrap();
        let gq = q0.kernel_at(&path, 0).unwrap().row_sums();
        for (l, gi) in one.ln_h[0].iter().zip(&gq) {
            assert_relative_eq!(l.exp(), gi / one.run.lambdas[0], max_relative = 1e-10);
        }
        assert!((one.nu_h0 - 1.0).abs() < 1e-8);

        let dec = s_decompose(&lin, Scenario::Filter, &path, 10, &lam, &v).unwrap();
        assert!((dec.nu_h0 - 1.0).abs() < 1e-8);
        assert!(dec.max_rowsum_error() < 1e-8);
        assert!(vnorm(&dec.reconstruction.sub(&dec.run.etas[10]).unwrap(), &v) < 1e-6);
        assert!(dec.ln_h.iter().flatten().all(|l| l.is_finite()));
        assert!((integrate(&dec.reconstruction, |_| 1.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sidecar_round_trip() {
        let lin = ModelSpec::linear(0.5, 1.0).unwrap();
        let (_, path) = simulate(&lin, 4, 1).unwrap();
        let g = Grid::symmetric(6.0, 50).unwrap();
        let lam = GridMeasure::gaussian(g.clone(), 0.0, 1.0).unwrap();
        let out = run(&lin, Scenario::Filter, &lam, &path, &abs1()).unwrap();
        let mut buf = Vec::new();
        out.write_density_sidecar(&mut buf).unwrap();
        let (nodes, ws) = read_density_sidecar(&buf).unwrap();
        assert_eq!(nodes, g.nodes());
        assert_eq!(ws.len(), out.etas.len());
        assert_eq!(ws[3], out.etas[3].weights());
    }
}
