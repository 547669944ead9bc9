//! Python bindings: path generation, the kernel and transfer functions, the
//! Riccati oracle, the Picard LQ solver and the command line entry point.

use mixfrac::cli::{picard_options, RunConfig};
use mixfrac::fbm::{self, Hurst, PathSet, TimeGrid};
use mixfrac::lq::{lq_picard_solve, riccati_oracle, LqSpec};
use mixfrac::transforms::{self, GridFunction};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: mixfrac::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn hurst(h: f64) -> PyResult<Hurst> {
    Hurst::new(h).map_err(py_err)
}

fn grid_function(values: Vec<f64>, horizon: f64) -> PyResult<GridFunction> {
    if values.len() < 2 {
        return Err(PyValueError::new_err("need at least two grid values"));
    }
    let grid = TimeGrid::new(horizon, values.len() - 1).map_err(py_err)?;
    GridFunction::new(grid, values).map_err(py_err)
}

/// `E[B^H(t) B^H(s)]`.
#[pyfunction]
fn fbm_covariance(t: f64, s: f64, h: f64) -> PyResult<f64> {
    fbm::fbm_covariance(t, s, hurst(h)?).map_err(py_err)
}

/// The Volterra kernel `Z_H(t, s)` of the Brownian representation.
#[pyfunction]
fn kernel_z(t: f64, s: f64, h: f64) -> PyResult<f64> {
    fbm::kernel_z(t, s, hurst(h)?).map_err(py_err)
}

/// `‖f‖²_φ` for `f` sampled on a uniform grid over `[0, horizon]`.
#[pyfunction]
fn phi_norm_sq(values: Vec<f64>, horizon: f64, h: f64) -> PyResult<f64> {
    Ok(transforms::phi_norm_sq(&grid_function(values, horizon)?, hurst(h)?))
}

/// `Γ*_H f` on the same grid as `values`.
#[pyfunction]
fn gamma_star(values: Vec<f64>, horizon: f64, h: f64) -> PyResult<Vec<f64>> {
    Ok(transforms::gamma_star(&grid_function(values, horizon)?, hurst(h)?).values().to_vec())
}

/// Sample one-dimensional paths. `generator` is `"kernel"` (mixed B and
/// B^H), `"cholesky"` (B^H only) or `"brownian"`.
#[pyfunction]
#[pyo3(signature = (h, horizon, n_steps, n_paths, seed, generator = "kernel"))]
fn generate_paths<'py>(
    py: Python<'py>,
    h: f64,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    generator: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let hh = hurst(h)?;
    let grid = TimeGrid::new(horizon, n_steps).map_err(py_err)?;
    let paths: PathSet = py
        .detach(|| match generator {
            "kernel" => Ok(fbm::generate_mixed(grid, hh, 1, n_paths, seed)),
            "cholesky" => Ok(fbm::CholeskyGenerator::new(grid, hh).and_then(|g| g.generate(1, 0, n_paths, seed))),
            "brownian" => Ok(fbm::generate_bm(grid, 1, n_paths, seed)),
            other => Err(other.to_string()),
        })
        .map_err(|g| PyValueError::new_err(format!("unknown generator {g:?}")))?
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("t", grid.nodes())?;
    if paths.has_brownian() {
        let b: Vec<Vec<f64>> = (0..n_paths).map(|p| paths.brownian(p, 0).to_vec()).collect();
        out.set_item("brownian", b)?;
    }
    if paths.has_fractional() {
        let bh: Vec<Vec<f64>> = (0..n_paths).map(|p| paths.fractional(p, 0).to_vec()).collect();
        out.set_item("fractional", bh)?;
    }
    Ok(out)
}

/// Riccati solution of the LQ problem without fractional noise; `spec`
/// holds the `[lq]` table of a run config as TOML.
#[pyfunction]
#[pyo3(signature = (spec = "n = 0.0", n_steps = 256, substeps = 8))]
fn riccati<'py>(py: Python<'py>, spec: &str, n_steps: usize, substeps: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::parse(&format!("name = \"riccati\"\n[lq]\n{spec}")).map_err(py_err)?;
    let lq: LqSpec = cfg.lq.spec(cfg.horizon);
    let grid = TimeGrid::new(cfg.horizon, n_steps).map_err(py_err)?;
    let sol = riccati_oracle(&lq, &grid, substeps).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("t", grid.nodes())?;
    out.set_item("p", sol.p)?;
    out.set_item("gain", sol.gain)?;
    out.set_item("cost", sol.cost)?;
    Ok(out)
}

/// Run the Picard solver on a full run config (TOML text).
#[pyfunction]
fn solve_lq<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::parse(config).map_err(py_err)?;
    let (cost, p0, log, converged) = py
        .detach(|| -> mixfrac::Result<_> {
            let spec = cfg.lq.spec(cfg.horizon);
            let paths = fbm::generate_mixed(cfg.grid()?, cfg.hurst()?, 1, cfg.n_paths, cfg.seed)?;
            let sol = lq_picard_solve(&spec, &paths, &picard_options(&cfg.mc, cfg.mc.init))?;
            let log: Vec<(usize, f64, f64)> = sol.log.iter().map(|r| (r.iteration, r.change, r.cost.mean)).collect();
            Ok((sol.cost, sol.adjoint.p_stats[0], log, sol.converged))
        })
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("cost", cost.mean)?;
    out.set_item("cost_stderr", cost.stderr)?;
    out.set_item("p0", p0.mean)?;
    out.set_item("p0_stderr", p0.stderr)?;
    out.set_item("converged", converged)?;
    out.set_item("log", log)?;
    Ok(out)
}

/// The `mixfrac` command line; returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("mixfrac".to_string()).chain(args).collect();
    py.detach(|| mixfrac::cli::run(argv))
}

#[pymodule]
fn mixfrac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fbm_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_z, m)?)?;
    m.add_function(wrap_pyfunction!(phi_norm_sq, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_star, m)?)?;
    m.add_function(wrap_pyfunction!(generate_paths, m)?)?;
    m.add_function(wrap_pyfunction!(riccati, m)?)?;
    m.add_function(wrap_pyfunction!(solve_lq, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
