//! Brownian and fractional Brownian path bundles.
//!
//! The fractional component is built from the same Brownian increments
//! through the Volterra kernel `Z_H`, so `B` and `B^H` are jointly coherent.
//! A Cholesky generator with the exact finite-dimensional law serves as the
//! oracle for the kernel generator.

use std::io::Write;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::beta::{beta, beta_reg};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::rng::{stream, StreamDomain};

/// Hurst exponent restricted to the long-memory range `(1/2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hurst(f64);

impl Hurst {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.5 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::Domain(format!("Hurst parameter must lie in (1/2, 1), got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Uniform partition of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("grid needs at least one step".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }

    /// Coarser grid with `n_steps / factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::GridMismatch(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.n_steps
            )));
        }
        Self::new(self.horizon, self.n_steps / factor)
    }
}

/// `E[B^H(t) B^H(s)] = ½(t^{2H} + s^{2H} − |t−s|^{2H})`.
pub fn fbm_covariance(t: f64, s: f64, h: Hurst) -> Result<f64> {
    if t < 0.0 || s < 0.0 {
        return Err(Error::Domain(format!("times must be non-negative, got ({t}, {s})")));
    }
    Ok(covariance_unchecked(t, s, h.value()))
}

pub(crate) fn covariance_unchecked(t: f64, s: f64, h: f64) -> f64 {
    let e = 2.0 * h;
    0.5 * (t.powf(e) + s.powf(e) - (t - s).abs().powf(e))
}

/// Normalising constant of the kernel representation.
pub fn kappa_h(h: Hurst) -> f64 {
    kappa_h_unchecked(h.value())
}

/// [`kappa_h`] without the range check, for boundary sanity checks.
pub fn kappa_h_unchecked(h: f64) -> f64 {
    (2.0 * h * gamma(1.5 - h) / (gamma(h + 0.5) * gamma(2.0 - 2.0 * h))).sqrt()
}

/// The Volterra kernel `Z_H(t, s)`, defined for `0 < s < t`.
pub fn kernel_z(t: f64, s: f64, h: Hurst) -> Result<f64> {
    if !(s > 0.0 && s < t) {
        return Err(Error::Domain(format!("kernel is defined for 0 < s < t, got t={t}, s={s}")));
    }
    let hv = h.value();
    let reg = kernel_regular_part(t, s, hv, kappa_h(h));
    Ok(s.powf(0.5 - hv) * (t - s).powf(hv - 0.5) * reg)
}

/// Smooth factor of the kernel: `Z_H(t,s) = s^{1/2−H} (t−s)^{H−1/2} R(t,s)`.
///
/// Integrating the inner `∫_s^t u^{H−3/2}(u−s)^{H−1/2} du` by parts in the
/// variable `s/u` leaves a regular incomplete beta function:
/// `R = κ/2 · [t^{H−1/2} + (H−1/2) B(2−2H, H−1/2) I_{1−s/t}(H−1/2, 2−2H)
///  · s^{2H−1} (t−s)^{1/2−H}]`.
fn kernel_regular_part(t: f64, s: f64, h: f64, kappa: f64) -> f64 {
    let (p, q) = (2.0 - 2.0 * h, h - 0.5);
    let tail_fraction = beta_reg(q, p, 1.0 - s / t);
    let tail = q * beta(p, q) * tail_fraction * s.powf(2.0 * h - 1.0) * (t - s).powf(0.5 - h);
    0.5 * kappa * (t.powf(h - 0.5) + tail)
}

/// `∫_a^b s^{1/2−H}(t−s)^{H−1/2} ds` for `0 ≤ a < b ≤ t`, through the
/// regularised incomplete beta function (`p + q − 1 = 1`).
fn singular_factor_integral(a: f64, b: f64, t: f64, h: f64) -> f64 {
    let (p, q) = (1.5 - h, h + 0.5);
    let (xa, xb) = (a / t, b / t);
    let diff = if xa < 0.5 {
        beta_reg(p, q, xb.min(1.0)) - beta_reg(p, q, xa)
    } else {
        // Complementary form keeps precision near the diagonal.
        beta_reg(q, p, 1.0 - xa) - beta_reg(q, p, (1.0 - xb).max(0.0))
    };
    t * beta(p, q) * diff
}

/// Per-cell weights `w(t_k, i)` of the kernel generator:
/// `B^H(t_k) = Σ_{i<k} w(t_k, i) ΔB_i`.
///
/// Each weight is the cell average of `Z_H(t_k, ·)`: the singular factor
/// `s^{1/2−H}(t_k−s)^{H−1/2}` is integrated exactly over the cell and the
/// smooth remainder is taken at the cell midpoint.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    grid: TimeGrid,
    hurst: Hurst,
    // Row k (1 ≤ k ≤ n) holds k entries, packed.
    packed: Vec<f64>,
}

impl KernelWeights {
    pub fn new(grid: TimeGrid, hurst: Hurst) -> Self {
        let n = grid.n_steps();
        let dt = grid.dt();
        let h = hurst.value();
        let kappa = kappa_h(hurst);
        let rows: Vec<Vec<f64>> = (1..=n)
            .into_par_iter()
            .map(|k| {
                let t = grid.node(k);
                (0..k)
                    .map(|i| {
                        let a = i as f64 * dt;
                        let b = if i + 1 == k { t } else { (i + 1) as f64 * dt };
                        let mid = 0.5 * (a + b);
                        kernel_regular_part(t, mid, h, kappa) * singular_factor_integral(a, b, t, h) / dt
                    })
                    .collect()
            })
            .collect();
        Self { grid, hurst, packed: rows.concat() }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> Hurst {
        self.hurst
    }

    /// Weights for node `k`, one per cell `0..k`.
    pub fn row(&self, k: usize) -> &[f64] {
        if k == 0 {
            return &[];
        }
        let start = k * (k - 1) / 2;
        &self.packed[start..start + k]
    }

    /// `w(t_k, i)`, zero for `i ≥ k`.
    pub fn weight(&self, k: usize, i: usize) -> f64 {
        if i < k {
            self.row(k)[i]
        } else {
            0.0
        }
    }

    /// Covariance of generated node values implied by the weights.
    pub fn implied_covariance(&self, k: usize, l: usize) -> f64 {
        let (rk, rl) = (self.row(k), self.row(l));
        rk.iter().zip(rl).map(|(a, b)| a * b).sum::<f64>() * self.grid.dt()
    }
}

/// Increments of one path, all dimensions, in a self-contained buffer that
/// integrators can read (and oracles can perturb).
#[derive(Debug, Clone)]
pub struct PathNoise {
    pub m: usize,
    pub n: usize,
    /// `ΔB_j[k]` at `j * n + k`.
    pub db: Vec<f64>,
    /// `ΔB^H_j[k]` at `j * n + k`.
    pub dbh: Vec<f64>,
}

impl PathNoise {
    pub fn db(&self, j: usize, k: usize) -> f64 {
        self.db[j * self.n + k]
    }

    pub fn dbh(&self, j: usize, k: usize) -> f64 {
        self.dbh[j * self.n + k]
    }

    /// Shift `ΔB_j[step]` by `h`, propagating into `ΔB^H_j` through the
    /// kernel weights so the pair stays coherent.
    pub fn bump(&mut self, j: usize, step: usize, h: f64, weights: Option<&KernelWeights>) {
        self.db[j * self.n + step] += h;
        if let Some(w) = weights {
            for k in step..self.n {
                let dw = w.weight(k + 1, step) - w.weight(k, step);
                self.dbh[j * self.n + k] += h * dw;
            }
        }
    }
}

/// A bundle of sampled paths on a shared grid.
///
/// Layout is path-major, then dimension, then node. Paths carry their global
/// index (`first_path + local`), which keys the random stream, so a bundle
/// generated in chunks is identical to one generated at once.
#[derive(Debug, Clone)]
pub struct PathSet {
    grid: TimeGrid,
    m: usize,
    first_path: usize,
    n_paths: usize,
    seed: u64,
    hurst: Option<Hurst>,
    increments: Option<Vec<f64>>,
    brownian: Option<Vec<f64>>,
    fractional: Option<Vec<f64>>,
    kernel: Option<Arc<KernelWeights>>,
}

impl PathSet {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dims(&self) -> usize {
        self.m
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn first_path(&self) -> usize {
        self.first_path
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hurst(&self) -> Option<Hurst> {
        self.hurst
    }

    pub fn kernel(&self) -> Option<&Arc<KernelWeights>> {
        self.kernel.as_ref()
    }

    pub fn has_brownian(&self) -> bool {
        self.brownian.is_some()
    }

    pub fn has_fractional(&self) -> bool {
        self.fractional.is_some()
    }

    fn node_offset(&self, path: usize, dim: usize) -> usize {
        (path * self.m + dim) * self.grid.n_nodes()
    }

    /// Brownian increments `ΔB[path][dim][·]`.
    pub fn increments(&self, path: usize, dim: usize) -> &[f64] {
        let n = self.grid.n_steps();
        let inc = self.increments.as_ref().expect("path set carries no Brownian increments");
        let o = (path * self.m + dim) * n;
        &inc[o..o + n]
    }

    /// `B[path][dim][·]` on all nodes.
    pub fn brownian(&self, path: usize, dim: usize) -> &[f64] {
        let o = self.node_offset(path, dim);
        let b = self.brownian.as_ref().expect("path set carries no Brownian paths");
        &b[o..o + self.grid.n_nodes()]
    }

    /// `B^H[path][dim][·]` on all nodes.
    pub fn fractional(&self, path: usize, dim: usize) -> &[f64] {
        let o = self.node_offset(path, dim);
        let b = self.fractional.as_ref().expect("path set carries no fractional paths");
        &b[o..o + self.grid.n_nodes()]
    }

    /// Self-contained increments for one path; requires coupled `B` and `B^H`.
    pub fn noise(&self, path: usize) -> Result<PathNoise> {
        if !self.has_brownian() || !self.has_fractional() {
            return Err(Error::GridMismatch(
                "integration needs coupled B and B^H on the same path set".into(),
            ));
        }
        let n = self.grid.n_steps();
        let mut db = Vec::with_capacity(self.m * n);
        let mut dbh = Vec::with_capacity(self.m * n);
        for j in 0..self.m {
            db.extend_from_slice(self.increments(path, j));
            let bh = self.fractional(path, j);
            dbh.extend(bh.windows(2).map(|w| w[1] - w[0]));
        }
        Ok(PathNoise { m: self.m, n, db, dbh })
    }

    /// Sum increments over blocks of `factor` steps. The fractional component
    /// is dropped; regenerate it on the coarse grid with [`fbm_from_kernel`].
    pub fn coarsen(&self, factor: usize) -> Result<PathSet> {
        let grid = self.grid.coarsen(factor)?;
        let inc = self
            .increments
            .as_ref()
            .ok_or_else(|| Error::GridMismatch("coarsening needs Brownian increments".into()))?;
        let n = self.grid.n_steps();
        let nc = grid.n_steps();
        let mut coarse = Vec::with_capacity(self.n_paths * self.m * nc);
        for row in inc.chunks(n) {
            coarse.extend(row.chunks(factor).map(|c| c.iter().sum::<f64>()));
        }
        let brownian = cumulate(&coarse, nc);
        Ok(PathSet {
            grid,
            m: self.m,
            first_path: self.first_path,
            n_paths: self.n_paths,
            seed: self.seed,
            hurst: self.hurst,
            increments: Some(coarse),
            brownian: Some(brownian),
            fractional: None,
            kernel: None,
        })
    }

    /// CSV with header `path,dim,node,t,B,BH`. Missing components are left
    /// empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path,dim,node,t,B,BH")?;
        for p in 0..self.n_paths {
            for j in 0..self.m {
                for k in 0..self.grid.n_nodes() {
                    let b = self.brownian.as_ref().map(|_| self.brownian(p, j)[k]);
                    let bh = self.fractional.as_ref().map(|_| self.fractional(p, j)[k]);
                    writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        self.first_path + p,
                        j,
                        k,
                        self.grid.node(k),
                        fmt_opt(b),
                        fmt_opt(bh)
                    )?;
                }
            }
        }
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cumulate(increments: &[f64], n: usize) -> Vec<f64> {
    let rows = increments.len() / n;
    let mut out = Vec::with_capacity(rows * (n + 1));
    for row in increments.chunks(n) {
        let mut acc = 0.0;
        out.push(0.0);
        for d in row {
            acc += d;
            out.push(acc);
        }
    }
    out
}

fn check_counts(m: usize, n_paths: usize) -> Result<()> {
    if m == 0 || n_paths == 0 {
        return Err(Error::Domain(format!(
            "need at least one dimension and one path (m={m}, n_paths={n_paths})"
        )));
    }
    Ok(())
}

/// Independent `N(0, Δ)` increments for `n_paths` paths and `m` dimensions.
pub fn generate_bm(grid: TimeGrid, m: usize, n_paths: usize, seed: u64) -> Result<PathSet> {
    generate_bm_range(grid, m, 0, n_paths, seed)
}

/// As [`generate_bm`], for the global path indices
/// `first_path..first_path + n_paths`.
pub fn generate_bm_range(
    grid: TimeGrid,
    m: usize,
    first_path: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathSet> {
    check_counts(m, n_paths)?;
    let n = grid.n_steps();
    let sd = grid.dt().sqrt();
    let rows: Vec<Vec<f64>> = (0..n_paths * m)
        .into_par_iter()
        .map(|r| {
            let (p, j) = (r / m, r % m);
            let mut rng = stream(seed, StreamDomain::Brownian, first_path + p, j);
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect()
        })
        .collect();
    let increments = rows.concat();
    let brownian = cumulate(&increments, n);
    Ok(PathSet {
        grid,
        m,
        first_path,
        n_paths,
        seed,
        hurst: None,
        increments: Some(increments),
        brownian: Some(brownian),
        fractional: None,
        kernel: None,
    })
}

/// Add `B^H` built from the bundle's own Brownian increments.
pub fn fbm_from_kernel(bm: PathSet, h: Hurst) -> Result<PathSet> {
    let weights = Arc::new(KernelWeights::new(bm.grid, h));
    fbm_from_kernel_with(bm, weights)
}

/// As [`fbm_from_kernel`] with precomputed weights (reused across chunks).
pub fn fbm_from_kernel_with(mut bm: PathSet, weights: Arc<KernelWeights>) -> Result<PathSet> {
    if weights.grid() != &bm.grid {
        return Err(Error::GridMismatch(format!(
            "kernel weights built for {:?}, paths live on {:?}",
            weights.grid(),
            bm.grid
        )));
    }
    let inc = bm
        .increments
        .as_ref()
        .ok_or_else(|| Error::GridMismatch("kernel generator needs Brownian increments".into()))?;
    let n = bm.grid.n_steps();
    let rows: Vec<Vec<f64>> = inc
        .par_chunks(n)
        .map(|db| {
            let mut out = Vec::with_capacity(n + 1);
            out.push(0.0);
            for k in 1..=n {
                let w = weights.row(k);
                out.push(w.iter().zip(db).map(|(a, b)| a * b).sum());
            }
            out
        })
        .collect();
    bm.fractional = Some(rows.concat());
    bm.hurst = Some(weights.hurst());
    bm.kernel = Some(weights);
    Ok(bm)
}

/// Exact-law generator: node values `B^H(t_1..t_n)` are `L z` with `L` the
/// Cholesky factor of the fBm covariance on the grid.
#[derive(Debug, Clone)]
pub struct CholeskyGenerator {
    grid: TimeGrid,
    hurst: Hurst,
    factor: Cholesky,
}

impl CholeskyGenerator {
    pub fn new(grid: TimeGrid, hurst: Hurst) -> Result<Self> {
        let n = grid.n_steps();
        let h = hurst.value();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let c = covariance_unchecked(grid.node(i + 1), grid.node(j + 1), h);
                cov[i * n + j] = c;
                cov[j * n + i] = c;
            }
        }
        let factor = Cholesky::factor(&cov, n)?;
        Ok(Self { grid, hurst, factor })
    }

    pub fn generate(&self, m: usize, first_path: usize, n_paths: usize, seed: u64) -> Result<PathSet> {
        check_counts(m, n_paths)?;
        let n = self.grid.n_steps();
        let rows: Vec<Vec<f64>> = (0..n_paths * m)
            .into_par_iter()
            .map(|r| {
                let (p, j) = (r / m, r % m);
                let mut rng = stream(seed, StreamDomain::Cholesky, first_path + p, j);
                let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut out = Vec::with_capacity(n + 1);
                out.push(0.0);
                for k in 0..n {
                    let l = self.factor.row(k);
                    out.push(l.iter().zip(&z).map(|(a, b)| a * b).sum());
                }
                out
            })
            .collect();
        Ok(PathSet {
            grid: self.grid,
            m,
            first_path,
            n_paths,
            seed,
            hurst: Some(self.hurst),
            increments: None,
            brownian: None,
            fractional: Some(rows.concat()),
            kernel: None,
        })
    }
}

/// `B^H` alone with the exact finite-dimensional law on the grid nodes.
pub fn fbm_from_cholesky(grid: TimeGrid, h: Hurst, m: usize, n_paths: usize, seed: u64) -> Result<PathSet> {
    CholeskyGenerator::new(grid, h)?.generate(m, 0, n_paths, seed)
}

/// Coupled `B`, `B^H` bundle from scratch.
pub fn generate_mixed(grid: TimeGrid, h: Hurst, m: usize, n_paths: usize, seed: u64) -> Result<PathSet> {
    fbm_from_kernel(generate_bm(grid, m, n_paths, seed)?, h)
}
