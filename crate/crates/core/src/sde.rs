//! Scalar SDEs driven by `m` Brownian motions and `m` fractional Brownian
//! motions: Euler for the Itô part, left-point Young sums for the fractional
//! part. Also the linearized (variation) equations around a reference pair.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbm::{PathNoise, PathSet, TimeGrid};
use crate::quad;
use crate::stats::MeanSe;

/// States beyond this magnitude abort the path.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

/// Drift `b`, Itô coefficients `σ_j` and fractional coefficients `γ_j` of a
/// scalar controlled SDE, with their state and control partials.
pub trait CoefficientModel: Send + Sync {
    fn id(&self) -> String;
    fn drivers(&self) -> usize;

    fn b(&self, t: f64, x: f64, u: f64) -> f64;
    fn b_x(&self, t: f64, x: f64, u: f64) -> f64;
    fn b_u(&self, t: f64, x: f64, u: f64) -> f64;

    fn sigma(&self, j: usize, t: f64, x: f64, u: f64) -> f64;
    fn sigma_x(&self, j: usize, t: f64, x: f64, u: f64) -> f64;
    fn sigma_u(&self, j: usize, t: f64, x: f64, u: f64) -> f64;

    fn gamma(&self, j: usize, t: f64, x: f64, u: f64) -> f64;
    fn gamma_x(&self, j: usize, t: f64, x: f64, u: f64) -> f64;
    fn gamma_u(&self, j: usize, t: f64, x: f64, u: f64) -> f64;

    /// Declared Lipschitz bound in `(x, u)`.
    fn lipschitz(&self) -> f64;
    /// Declared Hölder exponent of `γ` in time.
    fn holder_exponent(&self) -> f64;

    /// Coefficients are affine in `x` with partials independent of `(x, u)`.
    fn is_linear_in_state(&self) -> bool {
        false
    }
}

/// A partial that disagrees with its central finite difference.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialMismatch {
    pub name: String,
    pub t: f64,
    pub x: f64,
    pub u: f64,
    pub declared: f64,
    pub finite_difference: f64,
}

/// Compare every declared partial with a central difference at step `1e-5`
/// on `samples` random points of `[0,T] × [-2,2] × [-2,2]`.
pub fn check_partials(model: &dyn CoefficientModel, horizon: f64, samples: usize, seed: u64) -> Vec<PartialMismatch> {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    let mut check = |name: String, t: f64, x: f64, u: f64, declared: f64, fd: f64| {
        if (declared - fd).abs() > 1e-4 * declared.abs().max(1.0) {
            bad.push(PartialMismatch { name, t, x, u, declared, finite_difference: fd });
        }
    };
    for _ in 0..samples {
        let t = rng.random_range(0.0..horizon);
        let x = rng.random_range(-2.0..2.0);
        let u = rng.random_range(-2.0..2.0);
        let dx = |f: &dyn Fn(f64, f64) -> f64| (f(x + STEP, u) - f(x - STEP, u)) / (2.0 * STEP);
        let du = |f: &dyn Fn(f64, f64) -> f64| (f(x, u + STEP) - f(x, u - STEP)) / (2.0 * STEP);
        let b = |x, u| model.b(t, x, u);
        check("b_x".into(), t, x, u, model.b_x(t, x, u), dx(&b));
        check("b_u".into(), t, x, u, model.b_u(t, x, u), du(&b));
        for j in 0..model.drivers() {
            let s = |x, u| model.sigma(j, t, x, u);
            let g = |x, u| model.gamma(j, t, x, u);
            check(format!("sigma_x[{j}]"), t, x, u, model.sigma_x(j, t, x, u), dx(&s));
            check(format!("sigma_u[{j}]"), t, x, u, model.sigma_u(j, t, x, u), du(&s));
            check(format!("gamma_x[{j}]"), t, x, u, model.gamma_x(j, t, x, u), dx(&g));
            check(format!("gamma_u[{j}]"), t, x, u, model.gamma_u(j, t, x, u), du(&g));
        }
    }
    bad
}

/// `a·x + c·u + k` with constant coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Affine {
    pub x: f64,
    pub u: f64,
    pub c: f64,
}

impl Affine {
    pub fn new(x: f64, u: f64, c: f64) -> Self {
        Self { x, u, c }
    }

    fn eval(&self, x: f64, u: f64) -> f64 {
        self.x * x + self.u * u + self.c
    }
}

/// Coefficients affine in state and control.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub name: String,
    pub drift: Affine,
    pub sigma: Vec<Affine>,
    pub gamma: Vec<Affine>,
}

impl LinearModel {
    pub fn new(name: &str, drift: Affine, sigma: Vec<Affine>, gamma: Vec<Affine>) -> Result<Self> {
        if sigma.len() != gamma.len() || sigma.is_empty() {
            return Err(Error::Domain(format!(
                "need matching non-empty driver lists (sigma {}, gamma {})",
                sigma.len(),
                gamma.len()
            )));
        }
        Ok(Self { name: name.to_string(), drift, sigma, gamma })
    }
}

impl CoefficientModel for LinearModel {
    fn id(&self) -> String {
        self.name.clone()
    }
    fn drivers(&self) -> usize {
        self.sigma.len()
    }
    fn b(&self, _t: f64, x: f64, u: f64) -> f64 {
        self.drift.eval(x, u)
    }
    fn b_x(&self, _t: f64, _x: f64, _u: f64) -> f64 {
        self.drift.x
    }
    fn b_u(&self, _t: f64, _x: f64, _u: f64) -> f64 {
        self.drift.u
    }
    fn sigma(&self, j: usize, _t: f64, x: f64, u: f64) -> f64 {
        self.sigma[j].eval(x, u)
    }
    fn sigma_x(&self, j: usize, _t: f64, _x: f64, _u: f64) -> f64 {
        self.sigma[j].x
    }
    fn sigma_u(&self, j: usize, _t: f64, _x: f64, _u: f64) -> f64 {
        self.sigma[j].u
    }
    fn gamma(&self, j: usize, _t: f64, x: f64, u: f64) -> f64 {
        self.gamma[j].eval(x, u)
    }
    fn gamma_x(&self, j: usize, _t: f64, _x: f64, _u: f64) -> f64 {
        self.gamma[j].x
    }
    fn gamma_u(&self, j: usize, _t: f64, _x: f64, _u: f64) -> f64 {
        self.gamma[j].u
    }
    fn lipschitz(&self) -> f64 {
        let mut l = self.drift.x.abs().max(self.drift.u.abs());
        for a in self.sigma.iter().chain(&self.gamma) {
            l = l.max(a.x.abs()).max(a.u.abs());
        }
        l
    }
    fn holder_exponent(&self) -> f64 {
        1.0
    }
    fn is_linear_in_state(&self) -> bool {
        true
    }
}

/// `b = sin x + u`, `σ = cos x`, `γ = 0.5 + 0.1 sin x`, one driver.
#[derive(Debug, Clone, Copy, Default)]
pub struct SineModel;

impl CoefficientModel for SineModel {
    fn id(&self) -> String {
        "sine".into()
    }
    fn drivers(&self) -> usize {
        1
    }
    fn b(&self, _t: f64, x: f64, u: f64) -> f64 {
        x.sin() + u
    }
    fn b_x(&self, _t: f64, x: f64, _u: f64) -> f64 {
        x.cos()
    }
    fn b_u(&self, _t: f64, _x: f64, _u: f64) -> f64 {
        1.0
    }
    fn sigma(&self, _j: usize, _t: f64, x: f64, _u: f64) -> f64 {
        x.cos()
    }
    fn sigma_x(&self, _j: usize, _t: f64, x: f64, _u: f64) -> f64 {
        -x.sin()
    }
    fn sigma_u(&self, _j: usize, _t: f64, _x: f64, _u: f64) -> f64 {
        0.0
    }
    fn gamma(&self, _j: usize, _t: f64, x: f64, _u: f64) -> f64 {
        0.5 + 0.1 * x.sin()
    }
    fn gamma_x(&self, _j: usize, _t: f64, x: f64, _u: f64) -> f64 {
        0.1 * x.cos()
    }
    fn gamma_u(&self, _j: usize, _t: f64, _x: f64, _u: f64) -> f64 {
        0.0
    }
    fn lipschitz(&self) -> f64 {
        1.0
    }
    fn holder_exponent(&self) -> f64 {
        1.0
    }
}

/// Feedback law `u(t_k, x) = Σ_d c[k][d] x^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFeedback {
    coeffs: Vec<Vec<f64>>,
}

impl PolyFeedback {
    pub fn new(coeffs: Vec<Vec<f64>>) -> Self {
        Self { coeffs }
    }

    /// `u(t_k, x) = k_k · x`.
    pub fn linear(gains: &[f64]) -> Self {
        Self { coeffs: gains.iter().map(|&g| vec![0.0, g]).collect() }
    }

    pub fn n_nodes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self, node: usize) -> &[f64] {
        &self.coeffs[node]
    }

    pub fn eval(&self, node: usize, x: f64) -> f64 {
        self.coeffs[node].iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn eval_x(&self, node: usize, x: f64) -> f64 {
        let c = &self.coeffs[node];
        (1..c.len()).rev().fold(0.0, |acc, d| acc * x + d as f64 * c[d])
    }

    /// `a·self + b·other`, node by node.
    pub fn combine(&self, a: f64, other: &PolyFeedback, b: f64) -> PolyFeedback {
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(p, q)| {
                let len = p.len().max(q.len());
                (0..len)
                    .map(|d| a * p.get(d).copied().unwrap_or(0.0) + b * q.get(d).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        PolyFeedback { coeffs }
    }
}

/// Increments strictly before a node, handed to adapted-control callbacks.
pub struct PathPrefix<'a> {
    noise: &'a PathNoise,
    len: usize,
}

impl PathPrefix<'_> {
    /// Number of visible increments (equals the node index).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn db(&self, j: usize) -> &[f64] {
        &self.noise.db[j * self.noise.n..j * self.noise.n + self.len]
    }

    pub fn dbh(&self, j: usize) -> &[f64] {
        &self.noise.dbh[j * self.noise.n..j * self.noise.n + self.len]
    }

    /// `B_j` at the current node.
    pub fn b(&self, j: usize) -> f64 {
        self.db(j).iter().sum()
    }
}

/// An admissible control.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlProcess {
    /// Open-loop values `u[path][node]`, path-major.
    Table { n_paths: usize, n_nodes: usize, values: Vec<f64> },
    /// The same open-loop value on every path.
    Deterministic(Vec<f64>),
    Feedback(PolyFeedback),
}

impl ControlProcess {
    pub fn zero(grid: &TimeGrid) -> Self {
        Self::Deterministic(vec![0.0; grid.n_nodes()])
    }

    pub fn deterministic(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Self::Deterministic(grid.nodes().into_iter().map(f).collect())
    }

    /// Build an open-loop table whose value at node `k` sees only the
    /// increments with step index `< k`.
    pub fn adapted<F>(paths: &PathSet, f: F) -> Result<Self>
    where
        F: Fn(usize, f64, &PathPrefix) -> f64 + Sync,
    {
        let grid = *paths.grid();
        let rows: Vec<Vec<f64>> = (0..paths.n_paths())
            .into_par_iter()
            .map(|p| {
                let noise = paths.noise(p)?;
                Ok((0..grid.n_nodes())
                    .map(|k| f(k, grid.node(k), &PathPrefix { noise: &noise, len: k }))
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self::Table { n_paths: paths.n_paths(), n_nodes: grid.n_nodes(), values: rows.concat() })
    }

    pub fn is_open_loop(&self) -> bool {
        !matches!(self, Self::Feedback(_))
    }

    /// `u` at `(path, node)` given the current state.
    pub fn value(&self, path: usize, node: usize, x: f64) -> f64 {
        match self {
            Self::Table { n_nodes, values, .. } => values[path * n_nodes + node],
            Self::Deterministic(v) => v[node],
            Self::Feedback(fb) => fb.eval(node, x),
        }
    }

    /// `∂u/∂x` at `(node, x)`; zero for open-loop controls.
    pub fn value_x(&self, node: usize, x: f64) -> f64 {
        match self {
            Self::Feedback(fb) => fb.eval_x(node, x),
            _ => 0.0,
        }
    }

    fn check(&self, grid: &TimeGrid, n_paths: usize) -> Result<()> {
        let ok = match self {
            Self::Table { n_paths: p, n_nodes, values } => {
                *p == n_paths && *n_nodes == grid.n_nodes() && values.len() == p * n_nodes
            }
            Self::Deterministic(v) => v.len() == grid.n_nodes(),
            Self::Feedback(fb) => fb.n_nodes() == grid.n_nodes(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::GridMismatch("control does not match the grid or path count".into()))
        }
    }

    /// `self + ε·v` as an open-loop table; `self` is realized along `state`
    /// if it is a feedback law.
    pub fn perturbed(&self, v: &ControlProcess, eps: f64, state: &StatePath) -> Result<ControlProcess> {
        if !v.is_open_loop() {
            return Err(Error::Domain("perturbation direction must be open-loop".into()));
        }
        let n_nodes = state.grid.n_nodes();
        let mut values = Vec::with_capacity(state.n_paths * n_nodes);
        for p in 0..state.n_paths {
            for k in 0..n_nodes {
                let base = self.value(p, k, state.value(p, k));
                values.push(base + eps * v.value(p, k, f64::NAN));
            }
        }
        Ok(Self::Table { n_paths: state.n_paths, n_nodes, values })
    }

    /// Open-loop realization along `state`.
    pub fn realize(&self, state: &StatePath) -> Result<ControlProcess> {
        self.perturbed(&ControlProcess::zero(&state.grid), 0.0, state)
    }

    /// Mean over paths of `Σ_k u_k² Δ` (left-point).
    pub fn mean_square_norm(&self, state: &StatePath) -> f64 {
        let n = state.grid.n_steps();
        let dt = state.grid.dt();
        let per_path: Vec<f64> = (0..state.n_paths)
            .map(|p| (0..n).map(|k| self.value(p, k, state.value(p, k)).powi(2) * dt).sum())
            .collect();
        MeanSe::of(&per_path).mean
    }
}

/// Identifies where a state bundle came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub model: String,
    pub control: String,
    pub seed: u64,
}

/// Scalar process values on a bundle of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub first_path: usize,
    /// `X[path][node]`, path-major.
    pub values: Vec<f64>,
    /// Realized control `u[path][node]`; empty for auxiliary processes.
    pub controls: Vec<f64>,
    pub provenance: Provenance,
}

impl StatePath {
    pub fn value(&self, path: usize, node: usize) -> f64 {
        self.values[path * self.grid.n_nodes() + node]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let n = self.grid.n_nodes();
        &self.values[path * n..(path + 1) * n]
    }

    pub fn control(&self, path: usize, node: usize) -> f64 {
        self.controls[path * self.grid.n_nodes() + node]
    }

    /// Node values across paths.
    pub fn column(&self, node: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.value(p, node)).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path,node,t,X")?;
        for p in 0..self.n_paths {
            for k in 0..self.grid.n_nodes() {
                writeln!(out, "{},{},{},{}", self.first_path + p, k, self.grid.node(k), self.value(p, k))?;
            }
        }
        Ok(())
    }

    fn from_rows(paths: &PathSet, rows: Vec<Vec<f64>>, controls: Vec<f64>, provenance: Provenance) -> Self {
        Self {
            grid: *paths.grid(),
            n_paths: paths.n_paths(),
            first_path: paths.first_path(),
            values: rows.concat(),
            controls,
            provenance,
        }
    }
}

fn guard(x: f64, path: usize, step: usize) -> Result<f64> {
    if x.is_finite() && x.abs() <= BLOWUP_THRESHOLD {
        Ok(x)
    } else {
        Err(Error::Blowup { path, step, value: x })
    }
}

/// One path of the mixed Euler scheme; returns node states and the control
/// applied at each node. `path` indexes the control, `global` labels errors.
pub fn simulate_path(
    model: &dyn CoefficientModel,
    u: &ControlProcess,
    x0: f64,
    noise: &PathNoise,
    grid: &TimeGrid,
    path: usize,
    global: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut xs = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n + 1);
    let mut x = x0;
    xs.push(x);
    for k in 0..n {
        let t = grid.node(k);
        let uk = u.value(path, k, x);
        us.push(uk);
        let mut next = x + model.b(t, x, uk) * dt;
        for j in 0..noise.m {
            next += model.sigma(j, t, x, uk) * noise.db(j, k);
        }
        for j in 0..noise.m {
            next += model.gamma(j, t, x, uk) * noise.dbh(j, k);
        }
        x = guard(next, global, k + 1)?;
        xs.push(x);
    }
    us.push(u.value(path, n, x));
    Ok((xs, us))
}

fn check_drivers(model: &dyn CoefficientModel, paths: &PathSet) -> Result<()> {
    if model.drivers() != paths.dims() {
        return Err(Error::GridMismatch(format!(
            "model has {} drivers, paths carry {} dimensions",
            model.drivers(),
            paths.dims()
        )));
    }
    Ok(())
}

/// Integrate the controlled state on every path.
pub fn euler_mixed(model: &dyn CoefficientModel, u: &ControlProcess, x0: f64, paths: &PathSet) -> Result<StatePath> {
    check_drivers(model, paths)?;
    u.check(paths.grid(), paths.n_paths())?;
    let grid = *paths.grid();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| simulate_path(model, u, x0, &paths.noise(p)?, &grid, p, paths.first_path() + p))
        .collect::<Result<_>>()?;
    let (xs, us): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let provenance = Provenance { model: model.id(), control: control_label(u), seed: paths.seed() };
    Ok(StatePath::from_rows(paths, xs, us.concat(), provenance))
}

fn control_label(u: &ControlProcess) -> String {
    match u {
        ControlProcess::Table { .. } => "table".into(),
        ControlProcess::Deterministic(_) => "deterministic".into(),
        ControlProcess::Feedback(_) => "feedback".into(),
    }
}

/// Coefficient partials evaluated along a reference pair `(X*, u*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub m: usize,
    bx: Vec<f64>,
    bu: Vec<f64>,
    ux: Vec<f64>,
    sx: Vec<f64>,
    su: Vec<f64>,
    gx: Vec<f64>,
    gu: Vec<f64>,
}

impl Linearization {
    /// Partials along `state`, which must carry its realized control; `u`
    /// supplies `∂u/∂x` when it is a feedback law.
    pub fn along(model: &dyn CoefficientModel, state: &StatePath, u: &ControlProcess) -> Result<Self> {
        if state.controls.len() != state.values.len() {
            return Err(Error::GridMismatch("reference state carries no realized control".into()));
        }
        let nn = state.grid.n_nodes();
        let m = model.drivers();
        let mut lin = Self::zeros(state.grid, state.n_paths, m);
        for p in 0..state.n_paths {
            for k in 0..nn {
                let (t, x, uu) = (state.grid.node(k), state.value(p, k), state.control(p, k));
                let i = p * nn + k;
                lin.bx[i] = model.b_x(t, x, uu);
                lin.bu[i] = model.b_u(t, x, uu);
                lin.ux[i] = u.value_x(k, x);
                for j in 0..m {
                    let ij = (p * m + j) * nn + k;
                    lin.sx[ij] = model.sigma_x(j, t, x, uu);
                    lin.su[ij] = model.sigma_u(j, t, x, uu);
                    lin.gx[ij] = model.gamma_x(j, t, x, uu);
                    lin.gu[ij] = model.gamma_u(j, t, x, uu);
                }
            }
        }
        Ok(lin)
    }

    fn zeros(grid: TimeGrid, n_paths: usize, m: usize) -> Self {
        let s = n_paths * grid.n_nodes();
        Self {
            grid,
            n_paths,
            m,
            bx: vec![0.0; s],
            bu: vec![0.0; s],
            ux: vec![0.0; s],
            sx: vec![0.0; s * m],
            su: vec![0.0; s * m],
            gx: vec![0.0; s * m],
            gu: vec![0.0; s * m],
        }
    }

    /// Constant partials, the same for every driver.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(grid: TimeGrid, n_paths: usize, m: usize, bx: f64, bu: f64, sx: f64, su: f64, gx: f64, gu: f64) -> Self {
        let mut lin = Self::zeros(grid, n_paths, m);
        lin.bx.fill(bx);
        lin.bu.fill(bu);
        lin.sx.fill(sx);
        lin.su.fill(su);
        lin.gx.fill(gx);
        lin.gu.fill(gu);
        lin
    }

    fn i(&self, p: usize, k: usize) -> usize {
        p * self.grid.n_nodes() + k
    }

    fn ij(&self, p: usize, j: usize, k: usize) -> usize {
        (p * self.m + j) * self.grid.n_nodes() + k
    }

    pub fn bx(&self, p: usize, k: usize) -> f64 {
        self.bx[self.i(p, k)]
    }
    pub fn bu(&self, p: usize, k: usize) -> f64 {
        self.bu[self.i(p, k)]
    }
    pub fn ux(&self, p: usize, k: usize) -> f64 {
        self.ux[self.i(p, k)]
    }
    pub fn sx(&self, p: usize, j: usize, k: usize) -> f64 {
        self.sx[self.ij(p, j, k)]
    }
    pub fn su(&self, p: usize, j: usize, k: usize) -> f64 {
        self.su[self.ij(p, j, k)]
    }
    pub fn gx(&self, p: usize, j: usize, k: usize) -> f64 {
        self.gx[self.ij(p, j, k)]
    }
    pub fn gu(&self, p: usize, j: usize, k: usize) -> f64 {
        self.gu[self.ij(p, j, k)]
    }

    /// No `γ_u` anywhere along the reference pair.
    pub fn gamma_u_vanishes(&self) -> bool {
        self.gu.iter().all(|&v| v == 0.0)
    }

    fn check(&self, paths: &PathSet) -> Result<()> {
        if self.grid != *paths.grid() || self.n_paths != paths.n_paths() || self.m != paths.dims() {
            return Err(Error::GridMismatch("linearization does not match the path set".into()));
        }
        Ok(())
    }
}

fn integrate_linear<F>(lin: &Linearization, paths: &PathSet, label: &str, step: F) -> Result<StatePath>
where
    F: Fn(usize, usize, f64, &PathNoise) -> f64 + Sync,
{
    lin.check(paths)?;
    let n = paths.grid().n_steps();
    let rows: Vec<Vec<f64>> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let noise = paths.noise(p)?;
            let mut out = Vec::with_capacity(n + 1);
            let mut y = step(p, usize::MAX, 0.0, &noise);
            out.push(y);
            for k in 0..n {
                y = guard(step(p, k, y, &noise), paths.first_path() + p, k + 1)?;
                out.push(y);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let provenance = Provenance { model: label.into(), control: String::new(), seed: paths.seed() };
    Ok(StatePath::from_rows(paths, rows, Vec::new(), provenance))
}

/// `dΦ = b_x Φ dt + Σ σ_x Φ dB + Σ γ_x Φ dB^H`, `Φ(0) = 1`.
pub fn fundamental_phi(lin: &Linearization, paths: &PathSet) -> Result<StatePath> {
    let dt = paths.grid().dt();
    integrate_linear(lin, paths, "phi", |p, k, y, noise| {
        if k == usize::MAX {
            return 1.0;
        }
        let mut g = 1.0 + lin.bx(p, k) * dt;
        for j in 0..lin.m {
            g += lin.sx(p, j, k) * noise.db(j, k) + lin.gx(p, j, k) * noise.dbh(j, k);
        }
        y * g
    })
}

/// `dΨ = (−b_x + Σ σ_x²) Ψ dt − Σ σ_x Ψ dB − Σ γ_x Ψ dB^H`, `Ψ(0) = 1`.
pub fn fundamental_psi(lin: &Linearization, paths: &PathSet) -> Result<StatePath> {
    let dt = paths.grid().dt();
    integrate_linear(lin, paths, "psi", |p, k, y, noise| {
        if k == usize::MAX {
            return 1.0;
        }
        let mut drift = -lin.bx(p, k);
        let mut g = 1.0;
        for j in 0..lin.m {
            let s = lin.sx(p, j, k);
            drift += s * s;
            g -= s * noise.db(j, k) + lin.gx(p, j, k) * noise.dbh(j, k);
        }
        y * (g + drift * dt)
    })
}

fn open_loop(v: &ControlProcess) -> Result<()> {
    if v.is_open_loop() {
        Ok(())
    } else {
        Err(Error::Domain("variation direction must be open-loop".into()))
    }
}

/// Euler solution of the variation equation
/// `dy = (b_x y + b_u v)dt + Σ(σ_x y + σ_u v)dB + Σ(γ_x y + γ_u v)dB^H`.
pub fn variation_direct(lin: &Linearization, v: &ControlProcess, paths: &PathSet) -> Result<StatePath> {
    open_loop(v)?;
    v.check(paths.grid(), paths.n_paths())?;
    let dt = paths.grid().dt();
    integrate_linear(lin, paths, "variation_direct", |p, k, y, noise| {
        if k == usize::MAX {
            return 0.0;
        }
        let vk = v.value(p, k, f64::NAN);
        let mut next = y + (lin.bx(p, k) * y + lin.bu(p, k) * vk) * dt;
        for j in 0..lin.m {
            next += (lin.sx(p, j, k) * y + lin.su(p, j, k) * vk) * noise.db(j, k);
            next += (lin.gx(p, j, k) * y + lin.gu(p, j, k) * vk) * noise.dbh(j, k);
        }
        next
    })
}

/// The variation through the fundamental pair:
/// `y = Φ [∫Ψ(b_u − Σσ_xσ_u)v ds + Σ∫Ψσ_u v dB + Σ∫Ψγ_u v dB^H]`.
pub fn variation_explicit(
    phi: &StatePath,
    psi: &StatePath,
    lin: &Linearization,
    v: &ControlProcess,
    paths: &PathSet,
) -> Result<StatePath> {
    open_loop(v)?;
    lin.check(paths)?;
    v.check(paths.grid(), paths.n_paths())?;
    for s in [phi, psi] {
        if s.grid != *paths.grid() || s.n_paths != paths.n_paths() {
            return Err(Error::GridMismatch("fundamental pair does not match the path set".into()));
        }
    }
    let n = paths.grid().n_steps();
    let dt = paths.grid().dt();
    let rows: Vec<Vec<f64>> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let noise = paths.noise(p)?;
            let mut out = Vec::with_capacity(n + 1);
            let mut acc = 0.0;
            out.push(0.0);
            for k in 0..n {
                let vk = v.value(p, k, f64::NAN);
                let mut drift = lin.bu(p, k);
                let mut incr = 0.0;
                for j in 0..lin.m {
                    drift -= lin.sx(p, j, k) * lin.su(p, j, k);
                    incr += lin.su(p, j, k) * noise.db(j, k) + lin.gu(p, j, k) * noise.dbh(j, k);
                }
                acc += psi.value(p, k) * vk * (drift * dt + incr);
                out.push(phi.value(p, k + 1) * acc);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let provenance = Provenance { model: "variation_explicit".into(), control: String::new(), seed: paths.seed() };
    Ok(StatePath::from_rows(paths, rows, Vec::new(), provenance))
}

/// `|f(t_k)| + ∫_0^{t_k} |f(t_k) − f(s)| (t_k − s)^{−α−1} ds` at every node.
///
/// `|f(t_k) − f(·)|` is interpolated linearly on each cell and integrated
/// exactly against the power weight; on the cell ending at `t_k` the
/// interpolant vanishes at `t_k`, which leaves an integrable `(t_k−s)^{−α}`.
pub fn discrete_alpha_norm(values: &[f64], grid: &TimeGrid, alpha: f64) -> Result<Vec<f64>> {
    AlphaNorm::new(grid, alpha)?.eval(values)
}

/// [`discrete_alpha_norm`] with the cell moments tabulated once; on a
/// uniform grid they depend only on how many cells back the cell lies.
#[derive(Debug, Clone)]
pub struct AlphaNorm {
    grid: TimeGrid,
    /// `∫` over the cell `d` cells back of `(t_k − s)^{−α−1}` and of `(t_k − s)^{−α}`.
    moments: Vec<(f64, f64)>,
}

impl AlphaNorm {
    pub fn new(grid: &TimeGrid, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::Domain(format!("α must lie in (0, 1/2), got {alpha}")));
        }
        let p = -alpha - 1.0;
        let dt = grid.dt();
        let moments = (0..grid.n_nodes())
            .map(|d| {
                if d == 0 {
                    return (f64::NAN, f64::NAN);
                }
                let (a, b) = (0.0, dt);
                let t = d as f64 * dt;
                let m1 = quad::backward_power_moment(a, b, t, p + 1.0);
                let m0 = if d == 1 { f64::NAN } else { quad::backward_power_moment(a, b, t, p) };
                (m0, m1)
            })
            .collect();
        Ok(Self { grid: *grid, moments })
    }

    pub fn eval(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.grid.n_nodes() {
            return Err(Error::GridMismatch("values do not match the grid".into()));
        }
        let dt = self.grid.dt();
        Ok((0..values.len())
            .map(|k| {
                let g = |i: usize| (values[k] - values[i]).abs();
                let mut acc = 0.0;
                for i in 0..k {
                    let d = k - i;
                    let (m0, m1) = self.moments[d];
                    // Linear interpolant written as A + B (t − s).
                    let slope = (g(i) - g(i + 1)) / dt;
                    if d == 1 {
                        acc += slope * m1;
                    } else {
                        let intercept = g(i + 1) - slope * (d - 1) as f64 * dt;
                        acc += intercept * m0 + slope * m1;
                    }
                }
                values[k].abs() + acc
            })
            .collect())
    }
}

/// One row of the perturbation convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Row {
    pub epsilon: f64,
    pub metric: &'static str,
    pub value: f64,
    pub stderr: f64,
}

pub fn write_lemma1_csv<W: Write>(rows: &[Lemma1Row], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epsilon,metric,value,stderr")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epsilon, r.metric, r.value, r.stderr)?;
    }
    Ok(())
}

/// Default α for the perturbation norm: `1 − H + 0.4 (H − 1/2)`.
pub fn default_alpha(hurst: f64) -> f64 {
    1.0 - hurst + 0.4 * (hurst - 0.5)
}

/// For each `ε`, the size of `X̃^ε = (X^ε − X*)/ε − y` in three norms:
/// `terminal` = E|X̃(T)|², `sup` = E max_k |X̃_k|², `alpha` = E max_k ‖X̃‖²_{α,t_k}.
pub fn lemma1_experiment(
    model: &dyn CoefficientModel,
    u_star: &ControlProcess,
    v: &ControlProcess,
    x0: f64,
    epsilons: &[f64],
    paths: &PathSet,
    alpha: f64,
) -> Result<Vec<Lemma1Row>> {
    for &e in epsilons {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::Domain(format!("ε must lie in (0, 1), got {e}")));
        }
    }
    let x_star = euler_mixed(model, u_star, x0, paths)?;
    let u_open = u_star.realize(&x_star)?;
    let lin = Linearization::along(model, &x_star, &ControlProcess::zero(paths.grid()))?;
    let y = variation_direct(&lin, v, paths)?;
    let grid = *paths.grid();
    let norm = AlphaNorm::new(&grid, alpha)?;
    let mut rows = Vec::new();
    for &eps in epsilons {
        let u_eps = u_open.perturbed(v, eps, &x_star)?;
        let x_eps = euler_mixed(model, &u_eps, x0, paths)?;
        let per_path: Vec<[f64; 3]> = (0..paths.n_paths())
            .into_par_iter()
            .map(|p| {
                let r: Vec<f64> = (0..grid.n_nodes())
                    .map(|k| (x_eps.value(p, k) - x_star.value(p, k)) / eps - y.value(p, k))
                    .collect();
                let terminal = r[grid.n_steps()].powi(2);
                let sup = r.iter().fold(0.0f64, |a, v| a.max(v * v));
                let alpha_sup = norm
                    .eval(&r)?
                    .into_iter()
                    .fold(0.0f64, |a, v| a.max(v * v));
                Ok([terminal, sup, alpha_sup])
            })
            .collect::<Result<_>>()?;
        for (i, metric) in ["terminal", "sup", "alpha"].into_iter().enumerate() {
            let col: Vec<f64> = per_path.iter().map(|r| r[i]).collect();
            let s = MeanSe::of(&col);
            rows.push(Lemma1Row { epsilon: eps, metric, value: s.mean, stderr: s.stderr });
        }
    }
    Ok(rows)
}
