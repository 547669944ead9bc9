//! Adjoint processes `(p, q)` from their conditional-expectation
//! representations, estimated by cross-sectional least squares, and the
//! residuals of the first-order optimality system.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbm::{KernelWeights, PathNoise, PathSet, TimeGrid};
use crate::linalg::Cholesky;
use crate::sde::{
    euler_mixed, fundamental_phi, fundamental_psi, simulate_path, CoefficientModel, ControlProcess, Linearization,
    StatePath,
};
use crate::stats::{pairwise_sum, MeanSe};

/// Running cost `f(t, x, u)` and terminal cost `g(x)` with the partials the
/// adjoint needs.
pub trait CostModel: Send + Sync {
    fn f(&self, t: f64, x: f64, u: f64) -> f64;
    fn f_x(&self, t: f64, x: f64, u: f64) -> f64;
    fn f_u(&self, t: f64, x: f64, u: f64) -> f64;
    fn f_xx(&self, t: f64, x: f64, u: f64) -> f64;
    fn f_xu(&self, t: f64, x: f64, u: f64) -> f64;
    fn g(&self, x: f64) -> f64;
    fn g_x(&self, x: f64) -> f64;
    fn g_xx(&self, x: f64) -> f64;
}

/// `f = ½Q x² + ℓ x + ½R u²`, `g = ½G x² + g₁ x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCost {
    pub q: f64,
    pub l: f64,
    pub r: f64,
    pub g: f64,
    pub g1: f64,
}

impl CostModel for QuadraticCost {
    fn f(&self, _t: f64, x: f64, u: f64) -> f64 {
        0.5 * self.q * x * x + self.l * x + 0.5 * self.r * u * u
    }
    fn f_x(&self, _t: f64, x: f64, _u: f64) -> f64 {
        self.q * x + self.l
    }
    fn f_u(&self, _t: f64, _x: f64, u: f64) -> f64 {
        self.r * u
    }
    fn f_xx(&self, _t: f64, _x: f64, _u: f64) -> f64 {
        self.q
    }
    fn f_xu(&self, _t: f64, _x: f64, _u: f64) -> f64 {
        0.0
    }
    fn g(&self, x: f64) -> f64 {
        0.5 * self.g * x * x + self.g1 * x
    }
    fn g_x(&self, x: f64) -> f64 {
        self.g * x + self.g1
    }
    fn g_xx(&self, _x: f64) -> f64 {
        self.g
    }
}

/// Ridge added to the normal equations, relative to their trace.
pub const RIDGE: f64 = 1e-8;

/// Polynomial least-squares fit `E[Y | X = x] ≈ Σ_d β_d z^d`,
/// `z = (x − mean)/sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub mean: f64,
    pub sd: f64,
    pub beta: Vec<f64>,
    /// Heteroscedasticity-robust covariance of `beta`, row-major.
    pub beta_cov: Vec<f64>,
    /// Pivot-ratio conditioning proxy of the ridged normal matrix.
    pub condition: f64,
}

impl RegressionFit {
    fn z(&self, x: f64) -> f64 {
        if self.sd > 0.0 {
            (x - self.mean) / self.sd
        } else {
            0.0
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let z = self.z(x);
        self.beta.iter().rev().fold(0.0, |acc, b| acc * z + b)
    }

    /// Basis values `(1, z, z², …)` at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let z = self.z(x);
        let mut out = vec![1.0; self.beta.len()];
        for d in 1..out.len() {
            out[d] = out[d - 1] * z;
        }
        out
    }

    /// Variance of `Σ_d g_d β_d` from coefficient uncertainty alone.
    pub fn linear_form_variance(&self, g: &[f64]) -> f64 {
        let dim = self.beta.len();
        let mut v = 0.0;
        for i in 0..dim {
            for k in 0..dim {
                v += g[i] * self.beta_cov[i * dim + k] * g[k];
            }
        }
        v.max(0.0)
    }

    pub fn eval_x(&self, x: f64) -> f64 {
        if self.sd == 0.0 {
            return 0.0;
        }
        let z = self.z(x);
        let d = (1..self.beta.len()).rev().fold(0.0, |acc, d| acc * z + d as f64 * self.beta[d]);
        d / self.sd
    }

    /// Coefficients in powers of raw `x`.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        let deg = self.beta.len();
        let mut out = vec![0.0; deg];
        if self.sd == 0.0 {
            out[0] = self.beta[0];
            return out;
        }
        let (a, b) = (1.0 / self.sd, -self.mean / self.sd);
        // z^d = (a x + b)^d expanded binomially.
        for (d, beta) in self.beta.iter().enumerate() {
            let mut binom = 1.0;
            for i in 0..=d {
                out[i] += beta * binom * a.powi(i as i32) * b.powi((d - i) as i32);
                binom = binom * (d - i) as f64 / (i + 1) as f64;
            }
        }
        out
    }
}

/// Regress `y` on a degree-`degree` polynomial in standardized `x`.
pub fn regress(x: &[f64], y: &[f64], degree: usize, node: usize) -> Result<RegressionFit> {
    if degree == 0 {
        return Err(Error::Regression { node, reason: "basis degree must be at least 1".into() });
    }
    let n = x.len() as f64;
    let mean = pairwise_sum(x) / n;
    let dev: Vec<f64> = x.iter().map(|v| (v - mean).powi(2)).collect();
    let sd = (pairwise_sum(&dev) / n).sqrt();
    let dim = degree + 1;
    let mut a = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    let mut basis = vec![0.0; dim];
    for (xi, yi) in x.iter().zip(y) {
        let z = if sd > 0.0 { (xi - mean) / sd } else { 0.0 };
        basis[0] = 1.0;
        for d in 1..dim {
            basis[d] = basis[d - 1] * z;
        }
        for i in 0..dim {
            rhs[i] += basis[i] * yi;
            for j in 0..=i {
                a[i * dim + j] += basis[i] * basis[j];
            }
        }
    }
    let trace: f64 = (0..dim).map(|i| a[i * dim + i]).sum();
    for i in 0..dim {
        a[i * dim + i] += RIDGE * trace;
    }
    let chol = Cholesky::factor(&a, dim)
        .map_err(|e| Error::Regression { node, reason: format!("normal equations: {e}") })?;
    chol.solve_in_place(&mut rhs);
    if rhs.iter().any(|b| !b.is_finite()) {
        return Err(Error::Regression { node, reason: "non-finite coefficients".into() });
    }
    let mut fit = RegressionFit { mean, sd, beta: rhs, beta_cov: Vec::new(), condition: chol.pivot_condition() };
    // Sandwich A⁻¹ (Σ e² φφᵀ) A⁻¹.
    let mut meat = vec![0.0; dim * dim];
    for (xi, yi) in x.iter().zip(y) {
        let phi = fit.basis(*xi);
        let e2 = (yi - fit.eval(*xi)).powi(2);
        for i in 0..dim {
            for j in 0..dim {
                meat[i * dim + j] += e2 * phi[i] * phi[j];
            }
        }
    }
    let mut half = vec![0.0; dim * dim];
    for j in 0..dim {
        let mut col: Vec<f64> = (0..dim).map(|i| meat[i * dim + j]).collect();
        chol.solve_in_place(&mut col);
        for i in 0..dim {
            half[i * dim + j] = col[i];
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for i in 0..dim {
        let mut row: Vec<f64> = half[i * dim..(i + 1) * dim].to_vec();
        chol.solve_in_place(&mut row);
        for j in 0..dim {
            cov[i * dim + j] = row[j];
        }
    }
    fit.beta_cov = cov;
    Ok(fit)
}

/// A controlled system together with its cost, on a fixed path bundle.
#[derive(Clone, Copy)]
pub struct AdjointProblem<'a> {
    pub model: &'a dyn CoefficientModel,
    pub cost: &'a dyn CostModel,
    pub control: &'a ControlProcess,
    pub x0: f64,
    pub paths: &'a PathSet,
}

/// State, linearization and fundamental pair along the reference control.
#[derive(Debug, Clone)]
pub struct Reference {
    pub state: StatePath,
    pub lin: Linearization,
    pub phi: StatePath,
    pub psi: StatePath,
}

impl AdjointProblem<'_> {
    pub fn reference(&self) -> Result<Reference> {
        let state = euler_mixed(self.model, self.control, self.x0, self.paths)?;
        let lin = Linearization::along(self.model, &state, self.control)?;
        let phi = fundamental_phi(&lin, self.paths)?;
        let psi = fundamental_psi(&lin, self.paths)?;
        Ok(Reference { state, lin, phi, psi })
    }
}

impl Reference {
    /// `1/Φ_k`, the exact inverse of the discrete transition. The adjoint
    /// uses it in place of the separately integrated Ψ, whose Euler scheme
    /// drifts from `1/Φ` by `O(Δ)` and would break `p_n = g_x` consistency.
    pub fn inverse_phi(&self, path: usize, node: usize) -> Result<f64> {
        let v = self.phi.value(path, node);
        if v.abs() < 1e-12 || !v.is_finite() {
            return Err(Error::Domain(format!("Φ degenerate ({v}) on path {path} at node {node}")));
        }
        Ok(1.0 / v)
    }
}

/// Pathwise and projected adjoint values with per-node diagnostics.
#[derive(Debug, Clone)]
pub struct AdjointEstimate {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub m: usize,
    pub degree: usize,
    /// Projected `p[path][node]`.
    pub p: Vec<f64>,
    /// Unprojected `Ψ_k Y_k`, the regression target.
    pub p_raw: Vec<f64>,
    pub p_stats: Vec<MeanSe>,
    /// One fit per node; the terminal node is exact and carries none.
    pub p_fits: Vec<Option<RegressionFit>>,
    /// Projected `E[p̃_{k+1} | X_k]`, same layout as `p`; equals `p` at `T`.
    pub p_next: Vec<f64>,
    pub p_next_raw: Vec<f64>,
    pub p_next_fits: Vec<Option<RegressionFit>>,
    /// Projected `q_j[path][node]` at `(j * n_paths + path) * n_nodes + node`.
    pub q: Option<Vec<f64>>,
    pub q_raw: Option<Vec<f64>>,
    /// `q_stats[j * n_nodes + node]`.
    pub q_stats: Option<Vec<MeanSe>>,
    /// Fits of `Ψ D Y` per driver and node, `j * n_nodes + node`; the
    /// projected `q` subtracts `σ_x p` from them.
    pub q_fits: Option<Vec<RegressionFit>>,
    pub max_condition: f64,
}

impl AdjointEstimate {
    fn nn(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn p(&self, path: usize, node: usize) -> f64 {
        self.p[path * self.nn() + node]
    }

    pub fn q(&self, j: usize, path: usize, node: usize) -> f64 {
        self.q.as_ref().expect("q has not been estimated")[(j * self.n_paths + path) * self.nn() + node]
    }

    fn q_raw(&self, j: usize, path: usize, node: usize) -> f64 {
        self.q_raw.as_ref().expect("q has not been estimated")[(j * self.n_paths + path) * self.nn() + node]
    }

    pub fn q_stat(&self, j: usize, node: usize) -> Option<MeanSe> {
        self.q_stats.as_ref().map(|s| s[j * self.nn() + node])
    }

    /// CSV `node,t,p_mean,p_stderr,q_mean,q_stderr`; extra drivers append
    /// `q{j}_mean,q{j}_stderr` columns.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "node,t,p_mean,p_stderr,q_mean,q_stderr")?;
        for j in 1..self.m {
            write!(out, ",q{j}_mean,q{j}_stderr")?;
        }
        writeln!(out)?;
        for k in 0..self.nn() {
            let ps = self.p_stats[k];
            write!(out, "{},{},{},{}", k, self.grid.node(k), ps.mean, ps.stderr)?;
            for j in 0..self.m {
                match self.q_stat(j, k) {
                    Some(s) => write!(out, ",{},{}", s.mean, s.stderr)?,
                    None => write!(out, ",,")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Left-point suffix sums `Σ_{k≤i<n} h_i Δ`, the quadrature the discrete
/// cost itself uses, so that `p_n = g_x` closes the recursion exactly.
fn suffix_left(h: &[f64], dt: f64) -> Vec<f64> {
    let n = h.len() - 1;
    let mut out = vec![0.0; n + 1];
    for k in (0..n).rev() {
        out[k] = out[k + 1] + dt * h[k];
    }
    out
}

fn column(values: &[f64], n_paths: usize, nn: usize, k: usize) -> Vec<f64> {
    (0..n_paths).map(|p| values[p * nn + k]).collect()
}

/// `p(t) = Ψ(t) E[∫_t^T f_x Φ ds + g_x(X_T) Φ_T | F_t]`.
///
/// The product `Ψ_k Y_k` is regressed on polynomials of `X_k`; `Ψ_k` is
/// known at `t_k`, so it can sit inside the conditional expectation. Here
/// `Ψ_k = 1/Φ_k` and the time integral is the left-point sum, which makes
/// `p` the exact adjoint of the discrete cost. The terminal value is set to
/// `g_x(X_T)` exactly.
pub fn estimate_p(problem: &AdjointProblem, reference: &Reference, degree: usize) -> Result<AdjointEstimate> {
    let grid = *problem.paths.grid();
    let (n, nn, dt) = (grid.n_steps(), grid.n_nodes(), grid.dt());
    let n_paths = problem.paths.n_paths();
    let Reference { state, phi, .. } = reference;
    let cost = problem.cost;
    let raw_rows: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let h: Vec<f64> = (0..nn)
                .map(|k| cost.f_x(grid.node(k), state.value(p, k), state.control(p, k)) * phi.value(p, k))
                .collect();
            let terminal = cost.g_x(state.value(p, n)) * phi.value(p, n);
            suffix_left(&h, dt)
                .into_iter()
                .enumerate()
                .map(|(k, s)| Ok(reference.inverse_phi(p, k)? * (s + terminal)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let p_raw = raw_rows.concat();
    let fits: Vec<Option<RegressionFit>> = (0..nn)
        .into_par_iter()
        .map(|k| {
            if k == n {
                return Ok(None);
            }
            let x = state.column(k);
            let y = column(&p_raw, n_paths, nn, k);
            regress(&x, &y, degree, k).map(Some)
        })
        .collect::<Result<_>>()?;
    // E[p̃_{k+1} | X_k]: the costate the Euler step leaving t_k sees. The
    // stationarity condition of the discrete cost is written with it.
    let next_fits: Vec<Option<RegressionFit>> = (0..nn)
        .into_par_iter()
        .map(|k| {
            if k == n {
                return Ok(None);
            }
            let x = state.column(k);
            let y = column(&p_raw, n_paths, nn, k + 1);
            regress(&x, &y, degree, k).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut p = vec![0.0; n_paths * nn];
    let mut p_next = vec![0.0; n_paths * nn];
    let mut p_next_raw = vec![0.0; n_paths * nn];
    for path in 0..n_paths {
        for k in 0..nn {
            let x = state.value(path, k);
            let i = path * nn + k;
            p[i] = match &fits[k] {
                Some(fit) => fit.eval(x),
                None => cost.g_x(x),
            };
            p_next[i] = match &next_fits[k] {
                Some(fit) => fit.eval(x),
                None => p[i],
            };
            p_next_raw[i] = p_raw[path * nn + (k + 1).min(n)];
        }
    }
    let p_stats = (0..nn)
        .map(|k| {
            let proj = MeanSe::of(&column(&p, n_paths, nn, k));
            let raw = MeanSe::of(&column(&p_raw, n_paths, nn, k));
            MeanSe { mean: proj.mean, stderr: raw.stderr }
        })
        .collect();
    let max_condition = fits.iter().chain(&next_fits).flatten().map(|f| f.condition).fold(1.0, f64::max);
    Ok(AdjointEstimate {
        grid,
        n_paths,
        m: problem.model.drivers(),
        degree,
        p,
        p_raw,
        p_stats,
        p_fits: fits,
        p_next,
        p_next_raw,
        p_next_fits: next_fits,
        q: None,
        q_raw: None,
        q_stats: None,
        q_fits: None,
        max_condition,
    })
}

fn require_linear(model: &dyn CoefficientModel) -> Result<()> {
    if model.is_linear_in_state() {
        Ok(())
    } else {
        Err(Error::UnsupportedModel(format!(
            "model '{}' is not linear in the state; Malliavin derivatives need closed-form tangents",
            model.id()
        )))
    }
}

/// Per-path data for propagating derivatives with respect to one Brownian
/// increment through the Euler scheme.
struct TangentPath<'a> {
    problem: &'a AdjointProblem<'a>,
    reference: &'a Reference,
    weights: Option<&'a KernelWeights>,
    path: usize,
    db: Vec<f64>,
    dbh: Vec<f64>,
    /// Closed-loop state multiplier `∂X_{l+1}/∂X_l`.
    a: Vec<f64>,
}

impl<'a> TangentPath<'a> {
    fn new(problem: &'a AdjointProblem<'a>, reference: &'a Reference, path: usize) -> Result<Self> {
        let noise = problem.paths.noise(path)?;
        let grid = problem.paths.grid();
        let (n, dt) = (grid.n_steps(), grid.dt());
        let lin = &reference.lin;
        let a = (0..n)
            .map(|l| {
                let ux = lin.ux(path, l);
                let mut a = 1.0 + (lin.bx(path, l) + lin.bu(path, l) * ux) * dt;
                for j in 0..lin.m {
                    a += (lin.sx(path, j, l) + lin.su(path, j, l) * ux) * noise.db(j, l);
                    a += (lin.gx(path, j, l) + lin.gu(path, j, l) * ux) * noise.dbh(j, l);
                }
                a
            })
            .collect();
        Ok(Self {
            problem,
            reference,
            weights: problem.paths.kernel().map(|k| k.as_ref()),
            path,
            db: noise.db,
            dbh: noise.dbh,
            a,
        })
    }

    fn n(&self) -> usize {
        self.a.len()
    }

    fn coeffs(&self, l: usize) -> (f64, f64, f64) {
        let s = &self.reference.state;
        (self.problem.paths.grid().node(l), s.value(self.path, l), s.control(self.path, l))
    }

    /// `∂ΔB^H_j[l] / ∂ΔB_j[r]`.
    fn kernel_step(&self, l: usize, r: usize) -> f64 {
        match self.weights {
            Some(w) => w.weight(l + 1, r) - w.weight(l, r),
            None => 0.0,
        }
    }

    fn phi_multiplier(&self, j_all: usize, l: usize, dt: f64) -> f64 {
        let lin = &self.reference.lin;
        let n = self.n();
        let mut g = 1.0 + lin.bx(self.path, l) * dt;
        for j in 0..j_all {
            g += lin.sx(self.path, j, l) * self.db[j * n + l] + lin.gx(self.path, j, l) * self.dbh[j * n + l];
        }
        g
    }

    /// `∂X_s/∂ΔB_j[r]` and `∂Φ_s/∂ΔB_j[r]` for `s = 0..=n` (zero for `s ≤ r`).
    fn tangents(&self, j: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let dt = self.problem.paths.grid().dt();
        let lin = &self.reference.lin;
        let phi = &self.reference.phi;
        let model = self.problem.model;
        let mut dx = vec![0.0; n + 1];
        let mut dphi = vec![0.0; n + 1];
        for l in r..n {
            let (t, x, u) = self.coeffs(l);
            let kw = self.kernel_step(l, r);
            let mut inj_x = model.gamma(j, t, x, u) * kw;
            let mut inj_phi = lin.gx(self.path, j, l) * kw;
            if l == r {
                inj_x += model.sigma(j, t, x, u);
                inj_phi += lin.sx(self.path, j, l);
            }
            dx[l + 1] = self.a[l] * dx[l] + inj_x;
            dphi[l + 1] = self.phi_multiplier(lin.m, l, dt) * dphi[l] + phi.value(self.path, l) * inj_phi;
        }
        (dx, dphi)
    }

    /// `∂Y_k/∂ΔB_j[k]` for every `k < n`, where `Y_k` is the payoff whose
    /// conditional expectation defines `p`.
    fn payoff_derivatives(&self, j: usize) -> Vec<f64> {
        let n = self.n();
        if self.fractional_coupling(j) {
            (0..n).map(|r| self.payoff_derivative_direct(j, r)).collect()
        } else {
            self.payoff_derivatives_fast(j)
        }
    }

    fn fractional_coupling(&self, j: usize) -> bool {
        let lin = &self.reference.lin;
        let model = self.problem.model;
        self.weights.is_some()
            && (0..self.n()).any(|l| {
                let (t, x, u) = self.coeffs(l);
                model.gamma(j, t, x, u) != 0.0 || lin.gx(self.path, j, l) != 0.0
            })
    }

    fn payoff_weights(&self, s: usize) -> (f64, f64) {
        let cost = self.problem.cost;
        let (t, x, u) = self.coeffs(s);
        let ux = self.reference.lin.ux(self.path, s);
        (cost.f_xx(t, x, u) + cost.f_xu(t, x, u) * ux, cost.f_x(t, x, u))
    }

    fn payoff_derivative_direct(&self, j: usize, r: usize) -> f64 {
        let n = self.n();
        let dt = self.problem.paths.grid().dt();
        let phi = &self.reference.phi;
        let (dx, dphi) = self.tangents(j, r);
        let mut acc = 0.0;
        for s in r + 1..=n {
            let w = if s == n { 0.0 } else { dt };
            let (c_xx, c_x) = self.payoff_weights(s);
            acc += w * (c_xx * dx[s] * phi.value(self.path, s) + c_x * dphi[s]);
        }
        let xt = self.reference.state.value(self.path, n);
        let cost = self.problem.cost;
        acc + cost.g_xx(xt) * dx[n] * phi.value(self.path, n) + cost.g_x(xt) * dphi[n]
    }

    /// Without fractional coupling the bump enters only through step `r`, so
    /// `∂X_s = inj_r · A_s/A_{r+1}` and `∂Φ_s = Φ_r σ_x Φ_s/Φ_{r+1}`; suffix
    /// sums then give all `r` in `O(n)`.
    fn payoff_derivatives_fast(&self, j: usize) -> Vec<f64> {
        let n = self.n();
        let dt = self.problem.paths.grid().dt();
        let phi = &self.reference.phi;
        let lin = &self.reference.lin;
        let model = self.problem.model;
        let cost = self.problem.cost;
        let mut big_a = vec![1.0; n + 1];
        for l in 0..n {
            big_a[l + 1] = big_a[l] * self.a[l];
        }
        let xt = self.reference.state.value(self.path, n);
        let phit = phi.value(self.path, n);
        // Suffix sums over s > r of the state and Φ channels.
        let mut sx_suffix = vec![0.0; n + 1];
        let mut sp_suffix = vec![0.0; n + 1];
        let term_x = cost.g_xx(xt) * big_a[n] * phit;
        let term_p = cost.g_x(xt) * phit;
        for s in (1..=n).rev() {
            let w = if s == n { 0.0 } else { dt };
            let (c_xx, c_x) = self.payoff_weights(s);
            let ps = phi.value(self.path, s);
            let (nx, np) = if s == n { (term_x, term_p) } else { (0.0, 0.0) };
            let (ax, ap) = if s < n { (sx_suffix[s + 1], sp_suffix[s + 1]) } else { (0.0, 0.0) };
            sx_suffix[s] = ax + w * c_xx * big_a[s] * ps + nx;
            sp_suffix[s] = ap + w * c_x * ps + np;
        }
        (0..n)
            .map(|r| {
                let (t, x, u) = self.coeffs(r);
                let inj_x = model.sigma(j, t, x, u);
                let inj_phi = lin.sx(self.path, j, r) * phi.value(self.path, r);
                inj_x / big_a[r + 1] * sx_suffix[r + 1] + inj_phi / phi.value(self.path, r + 1) * sp_suffix[r + 1]
            })
            .collect()
    }
}

/// `q_j(t) = −σ_x p(t) + Ψ(t) E[D_t^j Y | F_t]`, with the Malliavin
/// derivative taken as the exact derivative of the Euler scheme with respect
/// to the Brownian increment leaving `t_k`. The terminal node uses the
/// continuum limit `(g_xx σ_T + g_x σ_x) − σ_x p_T`.
pub fn estimate_q_formula(problem: &AdjointProblem, reference: &Reference, est: &mut AdjointEstimate) -> Result<()> {
    require_linear(problem.model)?;
    let grid = *problem.paths.grid();
    let (n, nn) = (grid.n_steps(), grid.n_nodes());
    let n_paths = problem.paths.n_paths();
    let m = problem.model.drivers();
    let lin = &reference.lin;
    let mut q = vec![0.0; m * n_paths * nn];
    let mut q_raw = vec![0.0; m * n_paths * nn];
    let mut q_stats = vec![MeanSe { mean: 0.0, stderr: 0.0 }; m * nn];
    let mut q_fits = Vec::with_capacity(m * nn);
    for j in 0..m {
        // Ψ_k ∂Y_k per path.
        let rows: Vec<Vec<f64>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let tp = TangentPath::new(problem, reference, p)?;
                let mut dy = tp.payoff_derivatives(j);
                let (t, x, u) = tp.coeffs(n);
                let cost = problem.cost;
                let phit = reference.phi.value(p, n);
                dy.push((cost.g_xx(x) * problem.model.sigma(j, t, x, u) + cost.g_x(x) * lin.sx(p, j, n)) * phit);
                dy.into_iter().enumerate().map(|(k, d)| Ok(reference.inverse_phi(p, k)? * d)).collect()
            })
            .collect::<Result<_>>()?;
        let target = rows.concat();
        let fits: Vec<RegressionFit> = (0..nn)
            .into_par_iter()
            .map(|k| regress(&reference.state.column(k), &column(&target, n_paths, nn, k), est.degree, k))
            .collect::<Result<_>>()?;
        for p in 0..n_paths {
            for k in 0..nn {
                let sx = lin.sx(p, j, k);
                let i = (j * n_paths + p) * nn + k;
                q[i] = fits[k].eval(reference.state.value(p, k)) - sx * est.p(p, k);
                q_raw[i] = target[p * nn + k] - sx * est.p_raw[p * nn + k];
            }
        }
        for k in 0..nn {
            let proj: Vec<f64> = (0..n_paths).map(|p| q[(j * n_paths + p) * nn + k]).collect();
            let raw: Vec<f64> = (0..n_paths).map(|p| q_raw[(j * n_paths + p) * nn + k]).collect();
            q_stats[j * nn + k] = MeanSe { mean: MeanSe::of(&proj).mean, stderr: MeanSe::of(&raw).stderr };
        }
        est.max_condition = fits.iter().map(|f| f.condition).fold(est.max_condition, f64::max);
        q_fits.extend(fits);
    }
    est.q = Some(q);
    est.q_raw = Some(q_raw);
    est.q_stats = Some(q_stats);
    est.q_fits = Some(q_fits);
    Ok(())
}

/// `D_r^j X(s)` per path: the derivative of `X_s` with respect to `ΔB_j[r]`
/// for `s > r`, `σ_j(t_r)` at `s = r`, zero before.
pub fn malliavin_dx(problem: &AdjointProblem, reference: &Reference, j: usize, r: usize, s: usize) -> Result<Vec<f64>> {
    require_linear(problem.model)?;
    let n = problem.paths.grid().n_steps();
    if r > n || s > n {
        return Err(Error::Domain(format!("nodes ({r}, {s}) outside a grid of {n} steps")));
    }
    (0..problem.paths.n_paths())
        .into_par_iter()
        .map(|p| {
            if s < r {
                return Ok(0.0);
            }
            let tp = TangentPath::new(problem, reference, p)?;
            if s == r {
                let (t, x, u) = tp.coeffs(r);
                return Ok(problem.model.sigma(j, t, x, u));
            }
            Ok(tp.tangents(j, r).0[s])
        })
        .collect()
}

/// Finite-difference Malliavin oracle: bump `ΔB_j` on the step ending at
/// node `k` by `±h`, re-simulate with the control and the regression
/// coefficients frozen, and difference the re-evaluated `p_k`.
/// Returns per-node mean and standard error for each requested node `≥ 1`;
/// the standard error includes the uncertainty of the frozen coefficients,
/// which dominates the path-to-path spread.
pub fn estimate_q_bump(
    problem: &AdjointProblem,
    est: &AdjointEstimate,
    j: usize,
    nodes: &[usize],
    h: f64,
) -> Result<Vec<(usize, MeanSe)>> {
    let grid = *problem.paths.grid();
    let n = grid.n_steps();
    let weights = problem.paths.kernel().map(|k| k.as_ref());
    nodes
        .iter()
        .map(|&k| {
            if k == 0 || k > n {
                return Err(Error::Domain(format!("bump node must lie in 1..={n}, got {k}")));
            }
            let fit = est.p_fits[k].as_ref();
            let per_path: Vec<(f64, Vec<f64>)> = (0..problem.paths.n_paths())
                .into_par_iter()
                .map(|p| {
                    let base = problem.paths.noise(p)?;
                    let global = problem.paths.first_path() + p;
                    let state_at = |sign: f64| -> Result<f64> {
                        let mut noise = base.clone();
                        noise.bump(j, k - 1, sign * h, weights);
                        let (xs, _) = simulate_path(problem.model, problem.control, problem.x0, &noise, &grid, p, global)?;
                        Ok(xs[k])
                    };
                    let (up, down) = (state_at(1.0)?, state_at(-1.0)?);
                    Ok(match fit {
                        Some(fit) => {
                            let (bu, bd) = (fit.basis(up), fit.basis(down));
                            let g: Vec<f64> = bu.iter().zip(&bd).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                            ((fit.eval(up) - fit.eval(down)) / (2.0 * h), g)
                        }
                        None => ((problem.cost.g_x(up) - problem.cost.g_x(down)) / (2.0 * h), Vec::new()),
                    })
                })
                .collect::<Result<_>>()?;
            let values: Vec<f64> = per_path.iter().map(|(v, _)| *v).collect();
            let mut stat = MeanSe::of(&values);
            if let Some(fit) = fit {
                let dim = fit.beta.len();
                let g: Vec<f64> = (0..dim)
                    .map(|d| pairwise_sum(&per_path.iter().map(|(_, g)| g[d]).collect::<Vec<_>>()) / values.len() as f64)
                    .collect();
                stat.stderr = (stat.stderr.powi(2) + fit.linear_form_variance(&g)).sqrt();
            }
            Ok((k, stat))
        })
        .collect()
}

/// Default bump size `10^{-3} Δ^{1/2}`.
pub fn default_bump(grid: &TimeGrid) -> f64 {
    1e-3 * grid.dt().sqrt()
}

/// `Σ_j γ_u^j p` per node, mean and standard error over paths.
pub fn constraint_residual_gamma(reference: &Reference, est: &AdjointEstimate) -> Vec<MeanSe> {
    let lin = &reference.lin;
    (0..est.grid.n_nodes())
        .map(|k| {
            let col: Vec<f64> = (0..est.n_paths)
                .map(|p| (0..lin.m).map(|j| lin.gu(p, j, k)).sum::<f64>() * est.p(p, k))
                .collect();
            let raw: Vec<f64> = (0..est.n_paths)
                .map(|p| (0..lin.m).map(|j| lin.gu(p, j, k)).sum::<f64>() * est.p_raw[p * est.grid.n_nodes() + k])
                .collect();
            MeanSe { mean: MeanSe::of(&col).mean, stderr: MeanSe::of(&raw).stderr }
        })
        .collect()
}

/// `b_u p + Σ_j σ_u^j q_j + f_u` per node `k < n`, with `p` read one step
/// ahead (`E[p̃_{k+1} | X_k]`, which makes it the exact gradient of the
/// discrete cost); the control at `T` enters neither the Euler step nor the
/// left-point cost. Only the regime
/// `γ_u ≡ 0` is supported; otherwise the fractional Malliavin correction
/// terms would be needed.
pub fn stationarity_residual(problem: &AdjointProblem, reference: &Reference, est: &AdjointEstimate) -> Result<Vec<MeanSe>> {
    let lin = &reference.lin;
    if !lin.gamma_u_vanishes() {
        return Err(Error::UnsupportedRegime(
            "γ_u ≠ 0: the stationarity condition then carries fractional Malliavin correction terms \
             (double integrals against φ_1,H) that are not implemented"
                .into(),
        ));
    }
    let needs_q = (0..est.n_paths).any(|p| (0..lin.m).any(|j| (0..est.grid.n_nodes()).any(|k| lin.su(p, j, k) != 0.0)));
    if needs_q && est.q.is_none() {
        return Err(Error::Domain("σ_u ≠ 0 requires q; run estimate_q_formula first".into()));
    }
    let nn = est.grid.n_nodes();
    let state = &reference.state;
    Ok((0..nn - 1)
        .map(|k| {
            let t = est.grid.node(k);
            let mut proj = Vec::with_capacity(est.n_paths);
            let mut raw = Vec::with_capacity(est.n_paths);
            for p in 0..est.n_paths {
                let fu = problem.cost.f_u(t, state.value(p, k), state.control(p, k));
                let mut a = lin.bu(p, k) * est.p_next[p * nn + k] + fu;
                let mut b = lin.bu(p, k) * est.p_next_raw[p * nn + k] + fu;
                if needs_q {
                    for j in 0..lin.m {
                        a += lin.su(p, j, k) * est.q(j, p, k);
                        b += lin.su(p, j, k) * est.q_raw(j, p, k);
                    }
                }
                proj.push(a);
                raw.push(b);
            }
            MeanSe { mean: MeanSe::of(&proj).mean, stderr: MeanSe::of(&raw).stderr }
        })
        .collect())
}

/// Discrete residual of the adjoint BSDE.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeResidual {
    /// Per step `k < n`: mean and standard error of `r_k`.
    pub per_step: Vec<MeanSe>,
    /// `(1/n) Σ_k E[r_k²]`.
    pub mean_square: f64,
    /// `max |p_n − g_x(X_T)|` over paths.
    pub terminal_error: f64,
}

/// `r_k = p_{k+1} − p_k + (b_x p + Σσ_x q + f_x)Δ + Σγ_x p ΔB^H − Σ q ΔB`.
/// Means use the regressed adjoint, standard errors the unprojected one.
pub fn bsde_residual(problem: &AdjointProblem, reference: &Reference, est: &AdjointEstimate) -> Result<BsdeResidual> {
    if est.q.is_none() {
        return Err(Error::Domain("BSDE residual needs q; run estimate_q_formula first".into()));
    }
    let grid = est.grid;
    let (n, dt) = (grid.n_steps(), grid.dt());
    let lin = &reference.lin;
    let state = &reference.state;
    let nn = grid.n_nodes();
    let residual = |p: usize, k: usize, noise: &PathNoise, raw: bool| {
        let t = grid.node(k);
        let (pk, pk1) = if raw { (est.p_raw[p * nn + k], est.p_raw[p * nn + k + 1]) } else { (est.p(p, k), est.p(p, k + 1)) };
        let fx = problem.cost.f_x(t, state.value(p, k), state.control(p, k));
        let mut drift = lin.bx(p, k) * pk + fx;
        let mut r = pk1 - pk;
        for j in 0..lin.m {
            let qk = if raw { est.q_raw(j, p, k) } else { est.q(j, p, k) };
            drift += lin.sx(p, j, k) * qk;
            r += lin.gx(p, j, k) * pk * noise.dbh(j, k) - qk * noise.db(j, k);
        }
        r + drift * dt
    };
    let (rows, raw_rows): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..est.n_paths)
        .into_par_iter()
        .map(|p| {
            let noise = problem.paths.noise(p)?;
            Ok(((0..n).map(|k| residual(p, k, &noise, false)).collect(), (0..n).map(|k| residual(p, k, &noise, true)).collect()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let (flat, raw_flat) = (rows.concat(), raw_rows.concat());
    let per_step: Vec<MeanSe> = (0..n)
        .map(|k| MeanSe {
            mean: MeanSe::of(&column(&flat, est.n_paths, n, k)).mean,
            stderr: MeanSe::of(&column(&raw_flat, est.n_paths, n, k)).stderr,
        })
        .collect();
    let sq: Vec<f64> = rows.iter().flatten().map(|r| r * r).collect();
    let mean_square = pairwise_sum(&sq) / est.n_paths as f64 / n as f64;
    let terminal_error = (0..est.n_paths)
        .map(|p| (est.p(p, n) - problem.cost.g_x(state.value(p, n))).abs())
        .fold(0.0, f64::max);
    Ok(BsdeResidual { per_step, mean_square, terminal_error })
}

/// CSV `node,t,mean,stderr` for a per-node residual.
pub fn write_residual_csv<W: Write>(grid: &TimeGrid, rows: &[MeanSe], mut out: W) -> std::io::Result<()> {
    writeln!(out, "node,t,mean,stderr")?;
    for (k, r) in rows.iter().enumerate() {
        writeln!(out, "{},{},{},{}", k, grid.node(k), r.mean, r.stderr)?;
    }
    Ok(())
}
