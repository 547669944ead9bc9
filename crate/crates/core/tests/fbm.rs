use mixfrac::fbm::{
    fbm_covariance, generate_bm, generate_mixed, kappa_h, kernel_z, CholeskyGenerator, Hurst, TimeGrid,
};
use mixfrac::quad;
use mixfrac::stats::{correlation, covariance_se, variance_se, MeanSe};

fn h(v: f64) -> Hurst {
    Hurst::new(v).unwrap()
}

fn z(est: MeanSe, target: f64) -> f64 {
    (est.mean - target).abs() / est.stderr
}

#[test]
fn kernel_fixture_value() {
    // Paper form with the inner integral by 30-digit quadrature.
    let v = kernel_z(1.0, 0.5, h(0.75)).unwrap();
    assert!((v - 0.937_591_963_698_057_2).abs() < 1e-12, "{v}");
    assert!((kappa_h(h(0.75)) - 1.069_644_635_031_990_3).abs() < 1e-13);
}

#[test]
fn kernel_square_integrates_to_variance() {
    for hv in [0.6, 0.75, 0.9] {
        for t in [0.25, 0.5, 1.0] {
            // s = t·w^5 tames the s^{1−2H} singularity at the origin.
            let f = |w: f64| {
                let s = t * w.powi(5);
                // Z_H vanishes at both ends of (0, t).
                if s <= 0.0 || s >= t {
                    return 0.0;
                }
                kernel_z(t, s, h(hv)).unwrap().powi(2) * 5.0 * t * w.powi(4)
            };
            let got = quad::integrate(f, 0.0, 1.0, 1e-13, 1e-11);
            let want = t.powf(2.0 * hv);
            assert!((got / want - 1.0).abs() < 1e-6, "H={hv} t={t}: {got} vs {want}");
        }
    }
}

#[test]
fn brownian_increments_and_dimensions() {
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let ps = generate_bm(grid, 2, 20_000, 17).unwrap();
    for k in [0, 4, 7] {
        let a: Vec<f64> = (0..ps.n_paths()).map(|p| ps.increments(p, 0)[k]).collect();
        let b: Vec<f64> = (0..ps.n_paths()).map(|p| ps.increments(p, 1)[k]).collect();
        assert!(z(variance_se(&a), grid.dt()) <= 4.0);
        assert!(z(covariance_se(&a, &b), 0.0) <= 4.0);
    }
}

#[test]
fn cholesky_full_grid_covariance() {
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let hv = h(0.7);
    let ps = CholeskyGenerator::new(grid, hv).unwrap().generate(1, 0, 20_000, 23).unwrap();
    let col = |k: usize| -> Vec<f64> { (0..ps.n_paths()).map(|p| ps.fractional(p, 0)[k]).collect() };
    let mut worst: f64 = 0.0;
    for i in 1..=16 {
        for j in i..=16 {
            let exact = fbm_covariance(grid.node(i), grid.node(j), hv).unwrap();
            worst = worst.max(z(covariance_se(&col(i), &col(j)), exact));
        }
    }
    assert!(worst <= 4.0, "worst z {worst}");
}

#[test]
fn generators_agree_on_marginal_variance() {
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let hv = h(0.75);
    let chol = CholeskyGenerator::new(grid, hv).unwrap().generate(1, 0, 20_000, 5).unwrap();
    let kern = generate_mixed(grid, hv, 1, 20_000, 6).unwrap();
    for k in [16, 32, 64] {
        let a = variance_se(&(0..20_000).map(|p| chol.fractional(p, 0)[k]).collect::<Vec<_>>());
        let b = variance_se(&(0..20_000).map(|p| kern.fractional(p, 0)[k]).collect::<Vec<_>>());
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        // The kernel generator is about 1% short at n = 64.
        let allowance = 0.015 * grid.node(k).powf(1.5);
        assert!((a.mean - b.mean).abs() <= 4.0 * se + allowance, "node {k}: {a:?} vs {b:?}");
    }
}

#[test]
fn cholesky_self_similarity() {
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let hv = h(0.8);
    let ps = CholeskyGenerator::new(grid, hv).unwrap().generate(1, 0, 20_000, 31).unwrap();
    let var_at = |k: usize| variance_se(&(0..ps.n_paths()).map(|p| ps.fractional(p, 0)[k]).collect::<Vec<_>>());
    // a = 4: Var B^H(4t) / 4^{2H} against Var B^H(t).
    for k in [4, 8] {
        let scale = 4f64.powf(1.6);
        let big = var_at(4 * k);
        let small = var_at(k);
        let se = ((big.stderr / scale).powi(2) + small.stderr.powi(2)).sqrt();
        assert!((big.mean / scale - small.mean).abs() <= 4.0 * se, "k={k}");
    }
}

#[test]
fn mixed_paths_couple_b_and_bh() {
    // The kernel generator drives B^H from B itself, so they correlate.
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let ps = generate_mixed(grid, h(0.75), 1, 5000, 3).unwrap();
    let b: Vec<f64> = (0..5000).map(|p| ps.brownian(p, 0)[32]).collect();
    let bh: Vec<f64> = (0..5000).map(|p| ps.fractional(p, 0)[32]).collect();
    assert!(correlation(&b, &bh) > 0.5);
}
