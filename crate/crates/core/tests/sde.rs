use mixfrac::fbm::{fbm_from_kernel, generate_bm, Hurst, PathSet, TimeGrid};
use mixfrac::sde::{
    euler_mixed, fundamental_phi, fundamental_psi, variation_direct, variation_explicit, Affine, ControlProcess,
    Linearization, LinearModel,
};

fn nested(finest: usize, factors: &[usize], n_paths: usize, seed: u64) -> Vec<PathSet> {
    let bm = generate_bm(TimeGrid::new(1.0, finest).unwrap(), 1, n_paths, seed).unwrap();
    let h = Hurst::new(0.75).unwrap();
    factors.iter().map(|&f| fbm_from_kernel(bm.coarsen(f).unwrap(), h).unwrap()).collect()
}

fn model(drift: Affine, sigma: Affine, gamma: Affine) -> LinearModel {
    LinearModel::new("test", drift, vec![sigma], vec![gamma]).unwrap()
}

fn zero() -> Affine {
    Affine::default()
}

/// Mean over paths of `max_k |a − b|` against a closed form per node.
fn mean_max_error(paths: &PathSet, got: impl Fn(usize, usize) -> f64, want: impl Fn(usize, usize) -> f64) -> f64 {
    let n = paths.grid().n_steps();
    let total: f64 = (0..paths.n_paths())
        .map(|p| (0..=n).map(|k| (got(p, k) - want(p, k)).abs()).fold(0.0, f64::max))
        .sum();
    total / paths.n_paths() as f64
}

#[test]
fn pathwise_exponential_of_fractional_noise() {
    let c = 0.4;
    let m = model(zero(), zero(), Affine::new(c, 0.0, 0.0));
    let mut errs = Vec::new();
    for paths in nested(2048, &[8, 4, 2, 1], 200, 1) {
        let grid = *paths.grid();
        let x = euler_mixed(&m, &ControlProcess::zero(&grid), 1.0, &paths).unwrap();
        let n = grid.n_steps();
        let rel: f64 = (0..paths.n_paths())
            .map(|p| {
                let exact = (c * paths.fractional(p, 0)[n]).exp();
                (x.value(p, n) / exact - 1.0).abs()
            })
            .sum::<f64>()
            / paths.n_paths() as f64;
        errs.push(rel);
    }
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(errs[3] < 0.02, "{errs:?}");
}

#[test]
fn fundamental_pair_matches_exponentials() {
    let c = 0.5;
    let (mut ito_phi, mut ito_psi, mut frac_phi) = (Vec::new(), Vec::new(), Vec::new());
    for paths in nested(2048, &[8, 2], 200, 2) {
        let grid = *paths.grid();
        let u = ControlProcess::zero(&grid);
        let t = |k: usize| grid.node(k);

        let m = model(zero(), Affine::new(c, 0.0, 0.0), zero());
        let x = euler_mixed(&m, &u, 1.0, &paths).unwrap();
        let lin = Linearization::along(&m, &x, &u).unwrap();
        let phi = fundamental_phi(&lin, &paths).unwrap();
        let psi = fundamental_psi(&lin, &paths).unwrap();
        let b = |p: usize, k: usize| paths.brownian(p, 0)[k];
        ito_phi.push(mean_max_error(&paths, |p, k| phi.value(p, k), |p, k| (c * b(p, k) - 0.5 * c * c * t(k)).exp()));
        ito_psi.push(mean_max_error(&paths, |p, k| psi.value(p, k), |p, k| (-c * b(p, k) + 0.5 * c * c * t(k)).exp()));

        let m = model(zero(), zero(), Affine::new(c, 0.0, 0.0));
        let x = euler_mixed(&m, &u, 1.0, &paths).unwrap();
        let lin = Linearization::along(&m, &x, &u).unwrap();
        let phi = fundamental_phi(&lin, &paths).unwrap();
        frac_phi.push(mean_max_error(&paths, |p, k| phi.value(p, k), |p, k| (c * paths.fractional(p, 0)[k]).exp()));
    }
    for errs in [&ito_phi, &ito_psi, &frac_phi] {
        assert!(errs[1] < errs[0], "{errs:?}");
    }
    assert!(ito_phi[1] < 0.05 && ito_psi[1] < 0.05 && frac_phi[1] < 0.02, "{ito_phi:?} {ito_psi:?} {frac_phi:?}");
}

#[test]
fn explicit_variation_solves_the_deterministic_ode() {
    // y' = a y + b_u v, y(0) = 0, v = 1 + t.
    let (a, bu) = (-0.7, 1.3);
    let exact = |t: f64| {
        // Particular solution α + β t with β = −b_u/a, α = (β − b_u)/a.
        let beta = -bu / a;
        let alpha = (beta - bu) / a;
        alpha + beta * t - alpha * (a * t).exp()
    };
    let m = model(Affine::new(a, bu, 0.0), zero(), zero());
    let mut errs = Vec::new();
    for paths in nested(1024, &[4, 1], 3, 3) {
        let grid = *paths.grid();
        let u = ControlProcess::zero(&grid);
        let v = ControlProcess::deterministic(&grid, |t| 1.0 + t);
        let x = euler_mixed(&m, &u, 0.2, &paths).unwrap();
        let lin = Linearization::along(&m, &x, &u).unwrap();
        let phi = fundamental_phi(&lin, &paths).unwrap();
        let psi = fundamental_psi(&lin, &paths).unwrap();
        let y = variation_explicit(&phi, &psi, &lin, &v, &paths).unwrap();
        let direct = variation_direct(&lin, &v, &paths).unwrap();
        let n = grid.n_steps();
        let err = (0..=n).map(|k| (y.value(0, k) - exact(grid.node(k))).abs()).fold(0.0, f64::max);
        let gap = (0..=n).map(|k| (y.value(0, k) - direct.value(0, k)).abs()).fold(0.0, f64::max);
        assert!(gap < 10.0 * grid.dt(), "direct vs explicit {gap}");
        errs.push(err);
    }
    // First order: a 4× finer grid cuts the error about 4×.
    assert!(errs[1] < 0.35 * errs[0] && errs[1] < 2e-3, "{errs:?}");
}
