//! Finitely supported measures and nonnegative kernels on the real line.
//!
//! A measure lives on a [`Grid`] of strictly increasing nodes. Its weights are
//! density times cell width, so integrals are plain dot products and a kernel
//! row is itself a measure. Kernels are dense row-major matrices whose entries
//! already carry the target cell width, so composition is a matrix product.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Fraction of nodes (split evenly between both ends) counted as "outer" by
/// [`tail_diagnostic`].
pub const TAIL_FRACTION: f64 = 0.05;

/// Runs whose V-weighted tail fraction exceeds this are rejected.
pub const TAIL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Grid {
    nodes: Arc<[f64]>,
    widths: Arc<[f64]>,
    lo: f64,
    hi: f64,
    spacing: Option<f64>,
}

impl Grid {
    /// Midpoint grid with `n` equal cells on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) || n == 0 {
            return Err(Error::Domain(format!(
                "uniform grid needs finite lo < hi and n > 0 (got [{lo}, {hi}], n = {n})"
            )));
        }
        let h = (hi - lo) / n as f64;
        let nodes: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
        Ok(Self {
            nodes: nodes.into(),
            widths: vec![h; n].into(),
            lo,
            hi,
            spacing: Some(h),
        })
    }

    /// Symmetric window `[-half_width, half_width]`.
    pub fn symmetric(half_width: f64, n: usize) -> Result<Self> {
        Self::uniform(-half_width, half_width, n)
    }

    /// Arbitrary strictly increasing nodes inside `[lo, hi]`. Cell widths are
    /// the Voronoi cells clipped to the window.
    pub fn from_nodes(nodes: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Domain("grid needs at least one node".into()));
        }
        if nodes.iter().any(|x| !x.is_finite()) || nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("grid nodes must be finite and strictly increasing".into()));
        }
        if !(lo <= nodes[0] && nodes[nodes.len() - 1] <= hi) {
            return Err(Error::Domain(format!("nodes must lie inside [{lo}, {hi}]")));
        }
        let n = nodes.len();
        let widths: Vec<f64> = (0..n)
            .map(|i| {
                let left = if i == 0 { lo } else { 0.5 * (nodes[i - 1] + nodes[i]) };
                let right = if i + 1 == n { hi } else { 0.5 * (nodes[i] + nodes[i + 1]) };
                right - left
            })
            .collect();
        Ok(Self {
            nodes: nodes.into(),
            widths: widths.into(),
            lo,
            hi,
            spacing: None,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Cell width for uniform grids.
    pub fn spacing(&self) -> Option<f64> {
        self.spacing
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        Arc::ptr_eq(&self.nodes, &other.nodes) || self.nodes[..] == other.nodes[..]
    }

    /// Indices of nodes inside the closed interval `[a, b]`.
    pub fn indices_within(&self, a: f64, b: f64) -> std::ops::Range<usize> {
        let start = self.nodes.partition_point(|&x| x < a);
        let end = self.nodes.partition_point(|&x| x <= b);
        start..end.max(start)
    }
}

#[derive(Debug, Clone)]
pub struct GridMeasure {
    grid: Grid,
    weights: Vec<f64>,
}

impl GridMeasure {
    pub fn new(grid: Grid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} weights for {} nodes",
                weights.len(),
                grid.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Domain(format!("non-finite weight at node {i}")));
        }
        Ok(Self { grid, weights })
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, weights: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), weights.len());
        Self { grid, weights }
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, weights: vec![0.0; n] }
    }

    /// Unit atom at node `index`.
    pub fn dirac(grid: Grid, index: usize) -> Result<Self> {
        if index >= grid.len() {
            return Err(Error::Domain(format!("node index {index} out of range")));
        }
        let mut m = Self::zeros(grid);
        m.weights[index] = 1.0;
        Ok(m)
    }

    /// Weights `pdf(x_i) * width_i`; not normalized.
    pub fn from_density(grid: Grid, pdf: impl Fn(f64) -> f64) -> Result<Self> {
        let weights = grid
            .nodes()
            .iter()
            .zip(grid.widths())
            .map(|(&x, &w)| pdf(x) * w)
            .collect();
        Self::new(grid, weights)
    }

    /// Normalized grid Gaussian `N(mean, var)`.
    pub fn gaussian(grid: Grid, mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
            return Err(Error::Domain(format!("invalid Gaussian N({mean}, {var})")));
        }
        let m = Self::from_density(grid, |x| (-(x - mean).powi(2) / (2.0 * var)).exp())?;
        Ok(normalize(&m)?.0)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn nodes(&self) -> &[f64] {
        self.grid.nodes()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_probability(&self, tol: f64) -> bool {
        self.weights.iter().all(|&w| w >= 0.0) && (self.mass() - 1.0).abs() <= tol
    }

    pub fn mean(&self) -> f64 {
        integrate(self, |x| x) / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        integrate(self, |x| (x - m) * (x - m)) / self.mass()
    }

    /// Signed difference `self - other`.
    pub fn sub(&self, other: &GridMeasure) -> Result<GridMeasure> {
        check_same(&self.grid, &other.grid)?;
        let weights = self.weights.iter().zip(&other.weights).map(|(a, b)| a - b).collect();
        Ok(Self::from_parts_unchecked(self.grid.clone(), weights))
    }

    pub fn scaled(&self, factor: f64) -> GridMeasure {
        let weights = self.weights.iter().map(|w| w * factor).collect();
        Self::from_parts_unchecked(self.grid.clone(), weights)
    }

    /// Pointwise reweighting by a function evaluated at the nodes.
    pub fn reweighted(&self, phi: &[f64]) -> Result<GridMeasure> {
        if phi.len() != self.weights.len() {
            return Err(Error::GridMismatch("reweighting vector length".into()));
        }
        let weights = self.weights.iter().zip(phi).map(|(w, p)| w * p).collect();
        Ok(Self::from_parts_unchecked(self.grid.clone(), weights))
    }
}

fn check_same(a: &Grid, b: &Grid) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!(
            "grids with {} and {} nodes differ",
            a.len(),
            b.len()
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    /// `V(x) = exp(c |x|)`
    ExpAbs,
    /// `V(x) = exp(c x^2 / 2)`
    ExpSquare,
}

/// The weight function `V >= 1` defining the V-norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub family: WeightFamily,
    pub c: f64,
}

impl WeightSpec {
    pub fn new(family: WeightFamily, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Domain(format!("weight growth rate must be positive, got {c}")));
        }
        Ok(Self { family, c })
    }

    pub fn exp_abs(c: f64) -> Result<Self> {
        Self::new(WeightFamily::ExpAbs, c)
    }

    pub fn exp_square(c: f64) -> Result<Self> {
        Self::new(WeightFamily::ExpSquare, c)
    }

    /// `ln V(x)`, never overflows.
    pub fn ln_eval(&self, x: f64) -> f64 {
        match self.family {
            WeightFamily::ExpAbs => self.c * x.abs(),
            WeightFamily::ExpSquare => 0.5 * self.c * x * x,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.ln_eval(x).exp()
    }
}

/// `V(x)`; may overflow to `+inf`.
pub fn v_eval(v: &WeightSpec, x: f64) -> f64 {
    v.eval(x)
}

/// `sum_i weight(x_i) |w_i|` with the weight given through its logarithm.
///
/// Nodes carrying zero mass contribute nothing even where the weight
/// overflows; products that are representable are computed in log space when
/// the weight alone is not.
pub fn weighted_norm(m: &GridMeasure, ln_weight: impl Fn(f64) -> f64) -> f64 {
    m.nodes()
        .iter()
        .zip(m.weights())
        .map(|(&x, &w)| weighted_term(ln_weight(x), w))
        .sum()
}

#[inline]
pub(crate) fn weighted_term(ln_v: f64, w: f64) -> f64 {
    if w == 0.0 {
        return 0.0;
    }
    let v = ln_v.exp();
    if v.is_finite() {
        v * w.abs()
    } else {
        (ln_v + w.abs().ln()).exp()
    }
}

/// `||m||_V = sum_i V(x_i) |w_i|`.
pub fn vnorm(m: &GridMeasure, v: &WeightSpec) -> f64 {
    weighted_norm(m, |x| v.ln_eval(x))
}

/// Total variation mass `sum_i |w_i|` (the `V = 1` case).
pub fn tv_norm(m: &GridMeasure) -> f64 {
    weighted_norm(m, |_| 0.0)
}

pub fn integrate(m: &GridMeasure, phi: impl Fn(f64) -> f64) -> f64 {
    m.nodes().iter().zip(m.weights()).map(|(&x, &w)| phi(x) * w).sum()
}

/// Divides by total mass. Fails with [`Error::ZeroMass`] when the mass is not
/// a positive finite number.
pub fn normalize(m: &GridMeasure) -> Result<(GridMeasure, f64)> {
    let mass = m.mass();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::ZeroMass { step: None });
    }
    let weights = m.weights().iter().map(|w| w / mass).collect();
    Ok((GridMeasure::from_parts_unchecked(m.grid().clone(), weights), mass))
}

/// Share of the V-weighted mass carried by the outer nodes (2.5% at each end).
pub fn tail_diagnostic(m: &GridMeasure, v: &WeightSpec) -> f64 {
    let n = m.grid().len();
    let k = ((0.5 * TAIL_FRACTION * n as f64).ceil() as usize).clamp(1, n.div_ceil(2));
    let terms: Vec<f64> = m
        .nodes()
        .iter()
        .zip(m.weights())
        .map(|(&x, &w)| weighted_term(v.ln_eval(x), w))
        .collect();
    let total: f64 = terms.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let outer: f64 = terms[..k].iter().sum::<f64>() + terms[n - k..].iter().sum::<f64>();
    outer / total
}

/// Dense nonnegative kernel; `density[i * n_target + j]` is the kernel density
/// from source node `i` to target node `j` times the target cell width.
#[derive(Debug, Clone)]
pub struct KernelGrid {
    source: Grid,
    target: Grid,
    density: Vec<f64>,
}

impl KernelGrid {
    pub fn new(source: Grid, target: Grid, density: Vec<f64>) -> Result<Self> {
        if density.len() != source.len() * target.len() {
            return Err(Error::GridMismatch(format!(
                "kernel matrix has {} entries, expected {} x {}",
                density.len(),
                source.len(),
                target.len()
            )));
        }
        if let Some(k) = density.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Domain(format!("kernel entry {k} is negative or not finite")));
        }
        Ok(Self { source, target, density })
    }

    pub(crate) fn from_parts_unchecked(source: Grid, target: Grid, density: Vec<f64>) -> Self {
        Self { source, target, density }
    }

    /// Builds entries `kernel(x_i, x'_j) * width_j`.
    pub fn from_fn(source: Grid, target: Grid, kernel: impl Fn(f64, f64) -> f64 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        let nt = target.len();
        let mut density = vec![0.0; source.len() * nt];
        density.par_chunks_mut(nt).enumerate().for_each(|(i, row)| {
            let x = source.nodes()[i];
            for (j, d) in row.iter_mut().enumerate() {
                *d = kernel(x, target.nodes()[j]) * target.widths()[j];
            }
        });
        Self::new(source, target, density)
    }

    pub fn identity(grid: Grid) -> Self {
        let n = grid.len();
        let mut density = vec![0.0; n * n];
        for i in 0..n {
            density[i * n + i] = 1.0;
        }
        Self { source: grid.clone(), target: grid, density }
    }

    pub fn source(&self) -> &Grid {
        &self.source
    }

    pub fn target(&self) -> &Grid {
        &self.target
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.density[i * self.target.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let nt = self.target.len();
        &self.density[i * nt..(i + 1) * nt]
    }

    /// `Q(x_i, X)` for every source node.
    pub fn row_sums(&self) -> Vec<f64> {
        self.density
            .chunks(self.target.len())
            .map(|r| r.iter().sum())
            .collect()
    }

    /// `Q phi` evaluated at source nodes, with `phi` given at target nodes.
    pub fn apply_to_function(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.target.len() {
            return Err(Error::GridMismatch("function length differs from target grid".into()));
        }
        Ok(linalg::mat_vec(&self.density, phi, self.source.len()))
    }
}

/// `m K`: pushes a measure on the source grid to the target grid.
pub fn apply_kernel(m: &GridMeasure, k: &KernelGrid) -> Result<GridMeasure> {
    check_same(m.grid(), k.source())?;
    let weights = linalg::vec_mat(m.weights(), k.density(), k.target().len());
    Ok(GridMeasure::from_parts_unchecked(k.target().clone(), weights))
}

/// `a b` as kernels: first `a`, then `b`.
pub fn compose_kernels(a: &KernelGrid, b: &KernelGrid) -> Result<KernelGrid> {
    check_same(a.target(), b.source())?;
    let density = linalg::mat_mat(
        a.density(),
        b.density(),
        a.source().len(),
        a.target().len(),
        b.target().len(),
    );
    Ok(KernelGrid::from_parts_unchecked(a.source().clone(), b.target().clone(), density))
}

/// Operator V-norm `max_i sum_j K_ij V(x'_j) / V(x_i)`.
pub fn kernel_vnorm(k: &KernelGrid, v: &WeightSpec) -> f64 {
    let ln_vt: Vec<f64> = k.target().nodes().iter().map(|&x| v.ln_eval(x)).collect();
    k.source()
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ln_vx = v.ln_eval(x);
            k.row(i)
                .iter()
                .zip(&ln_vt)
                .map(|(&d, &lv)| if d == 0.0 { 0.0 } else { d * (lv - ln_vx).exp() })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}
