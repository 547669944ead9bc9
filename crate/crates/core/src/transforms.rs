//! Deterministic operators tied to the fractional kernel, and a Monte Carlo
//! check that `∫ f dB^H` and `∫ Γ*f dB` coincide.

use std::io::Write;

use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::fbm::{kappa_h, Hurst, PathSet, TimeGrid};
use crate::quad;
use crate::stats::{correlation, variance_se, MeanSe};

/// Node values of a deterministic function on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().into_iter().map(f).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Piecewise-linear interpolation.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.grid.n_steps();
        let x = (t / self.grid.dt()).clamp(0.0, n as f64);
        let i = (x.floor() as usize).min(n - 1);
        let frac = x - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &GridFunction, b: f64) -> Result<GridFunction> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("functions live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { grid: self.grid, values })
    }
}

/// `φ(s, t) = H(2H−1)|s−t|^{2H−2}`.
pub fn phi_kernel(s: f64, t: f64, h: Hurst) -> Result<f64> {
    if s == t {
        return Err(Error::Domain(format!("φ is singular on the diagonal (s = t = {s})")));
    }
    let hv = h.value();
    Ok(hv * (2.0 * hv - 1.0) * (s - t).abs().powf(2.0 * hv - 2.0))
}

/// `κ_1 = 1 / (2H Γ(H−1/2) Γ(3/2−H))`.
pub fn kappa_1(h: Hurst) -> f64 {
    let hv = h.value();
    1.0 / (2.0 * hv * gamma(hv - 0.5) * gamma(1.5 - hv))
}

/// `φ_{1,H}(s,t) = (2H²(2H−1)κ_1/κ_H) s^{1/2−H} |t−s|^{2H−2}`.
pub fn phi_1h(s: f64, t: f64, h: Hurst) -> Result<f64> {
    if !(s > 0.0) || s == t {
        return Err(Error::Domain(format!("φ_1,H needs s > 0 and s ≠ t, got s={s}, t={t}")));
    }
    let hv = h.value();
    let c = 2.0 * hv * hv * (2.0 * hv - 1.0) * kappa_1(h) / kappa_h(h);
    Ok(c * s.powf(0.5 - hv) * (t - s).abs().powf(2.0 * hv - 2.0))
}

/// `∫∫ φ` over cells `i` and `i + d` of width `Δ`; equals
/// `Cov(ΔB^H_i, ΔB^H_{i+d})`.
fn cell_pair_mass(d: usize, dt: f64, h: f64) -> f64 {
    let e = 2.0 * h;
    let d = d as f64;
    let second = (d + 1.0).powf(e) + (d - 1.0).abs().powf(e) - 2.0 * d.powf(e);
    0.5 * dt.powf(e) * second
}

/// `‖f‖²_T = ∫∫ f(s) f(r) φ(s,r) ds dr`.
///
/// `φ` is integrated exactly over every pair of cells (diagonal included)
/// and `f` is taken at cell midpoints.
pub fn phi_norm_sq(f: &GridFunction, h: Hurst) -> f64 {
    let grid = f.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let mid: Vec<f64> = f.values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let mass: Vec<f64> = (0..n).map(|d| cell_pair_mass(d, dt, h.value())).collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = mid[i] * mass[0];
        for j in i + 1..n {
            row += 2.0 * mid[j] * mass[j - i];
        }
        total += mid[i] * row;
    }
    total
}

/// `(Γ*f)(t)` at an arbitrary `t ∈ (0, T)`.
///
/// `g(u) = u^{H−1/2} f(u)` is replaced by its linear interpolant on each
/// cell and integrated exactly against `(u−t)^{H−3/2}`.
pub fn gamma_star_at(f: &GridFunction, h: Hurst, t: f64) -> f64 {
    let grid = f.grid();
    let hv = h.value();
    let horizon = grid.horizon();
    if t >= horizon {
        return 0.0;
    }
    let g = |u: f64, fu: f64| u.powf(hv - 0.5) * fu;
    let p = hv - 1.5;
    let dt = grid.dt();
    let first = ((t / dt).floor() as usize + 1).min(grid.n_steps());
    let mut a = t;
    let mut ga = g(t, f.eval(t));
    let mut acc = 0.0;
    for k in first..=grid.n_steps() {
        let b = grid.node(k);
        if b <= a {
            continue;
        }
        let gb = g(b, f.values[k]);
        acc += quad::forward_power_linear(a, b, t, p, ga, gb);
        a = b;
        ga = gb;
    }
    (hv - 0.5) * kappa_h(h) * t.powf(0.5 - hv) * acc
}

/// `Γ*f` at the grid nodes. Node 0 carries the value at `Δ/2`, where the
/// operator is finite.
pub fn gamma_star(f: &GridFunction, h: Hurst) -> GridFunction {
    let grid = *f.grid();
    let values = (0..grid.n_nodes())
        .map(|k| {
            let t = if k == 0 { 0.5 * grid.dt() } else { grid.node(k) };
            gamma_star_at(f, h, t)
        })
        .collect();
    GridFunction { grid, values }
}

/// `∫_0^T (Γ*f)(t)² dt`.
///
/// `(Γ*f)²` behaves like `t^{1−2H}` at the origin, so that factor is
/// integrated exactly per cell against the smooth remainder at midpoints.
pub fn gamma_star_norm_sq(f: &GridFunction, h: Hurst) -> f64 {
    let grid = f.grid();
    let hv = h.value();
    quad::product_midpoint_origin(
        |t| {
            let v = gamma_star_at(f, h, t);
            v * v * t.powf(2.0 * hv - 1.0)
        },
        grid.horizon(),
        grid.n_steps(),
        1.0 - 2.0 * hv,
    )
}

/// Outcome of [`transfer_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferReport {
    pub n_paths: usize,
    pub correlation: f64,
    pub var_lhs: MeanSe,
    pub var_rhs: MeanSe,
}

impl TransferReport {
    /// CSV rows `name,value,stderr`; the correlation has no standard error.
    pub fn write_csv<W: Write>(&self, mut out: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "name,value,stderr")?;
        }
        writeln!(out, "correlation,{},", self.correlation)?;
        writeln!(out, "var_lhs,{},{}", self.var_lhs.mean, self.var_lhs.stderr)?;
        writeln!(out, "var_rhs,{},{}", self.var_rhs.mean, self.var_rhs.stderr)
    }
}

/// Compare `L = Σ f(t_i) ΔB^H_i` with `R = Σ (Γ*f)(t_i) ΔB_i` path by path.
pub fn transfer_check(f: &GridFunction, paths: &PathSet, h: Hurst) -> Result<TransferReport> {
    if f.grid() != paths.grid() {
        return Err(Error::GridMismatch("function and paths live on different grids".into()));
    }
    if !paths.has_brownian() || !paths.has_fractional() {
        return Err(Error::GridMismatch("transfer check needs coupled B and B^H".into()));
    }
    let gs = gamma_star(f, h);
    let n = paths.grid().n_steps();
    let mut lhs = Vec::with_capacity(paths.n_paths() * paths.dims());
    let mut rhs = Vec::with_capacity(lhs.capacity());
    for p in 0..paths.n_paths() {
        for j in 0..paths.dims() {
            let bh = paths.fractional(p, j);
            let db = paths.increments(p, j);
            lhs.push((0..n).map(|i| f.values[i] * (bh[i + 1] - bh[i])).sum::<f64>());
            rhs.push((0..n).map(|i| gs.values[i] * db[i]).sum::<f64>());
        }
    }
    let correlation = if lhs.iter().all(|&x| x == 0.0) && rhs.iter().all(|&x| x == 0.0) {
        1.0
    } else {
        correlation(&lhs, &rhs)
    };
    Ok(TransferReport {
        n_paths: lhs.len(),
        correlation,
        var_lhs: variance_se(&lhs),
        var_rhs: variance_se(&rhs),
    })
}
