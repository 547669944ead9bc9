use mixfrac::cli::RunConfig;
use mixfrac::fbm::{fbm_covariance, generate_mixed, Hurst, TimeGrid};
use mixfrac::lq::{lq_cost, LqSpec, TimeFn};
use mixfrac::sde::{euler_mixed, Affine, ControlProcess, LinearModel};
use mixfrac::transforms::{gamma_star, phi_norm_sq, GridFunction};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn hurst() -> impl Strategy<Value = f64> {
    0.5001f64..0.999
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_symmetric_with_power_diagonal(h in hurst(), t in 0.0f64..5.0, s in 0.0f64..5.0) {
        let hh = Hurst::new(h).unwrap();
        let (a, b) = (fbm_covariance(t, s, hh).unwrap(), fbm_covariance(s, t, hh).unwrap());
        prop_assert_eq!(a, b);
        prop_assert!(close(fbm_covariance(t, t, hh).unwrap(), t.powf(2.0 * h), 1e-12));
        // Cauchy–Schwarz.
        prop_assert!(a.abs() <= (t.powf(2.0 * h) * s.powf(2.0 * h)).sqrt() * (1.0 + 1e-12));
    }

    #[test]
    fn hurst_outside_the_open_interval_is_rejected(h in prop_oneof![-2.0f64..=0.5, 1.0f64..3.0]) {
        prop_assert!(Hurst::new(h).is_err());
    }

    #[test]
    fn grid_nodes_are_uniform(horizon in 0.01f64..10.0, n in 1usize..500) {
        let grid = TimeGrid::new(horizon, n).unwrap();
        let nodes = grid.nodes();
        prop_assert_eq!(nodes.len(), n + 1);
        prop_assert_eq!(nodes[0], 0.0);
        prop_assert!(close(nodes[n], horizon, 1e-14));
        prop_assert!(nodes.windows(2).all(|w| close(w[1] - w[0], grid.dt(), 1e-9)));
    }

    #[test]
    fn paths_start_at_zero_and_sum_increments(seed in any::<u64>(), n in 1usize..40, m in 1usize..3) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let ps = generate_mixed(grid, Hurst::new(0.7).unwrap(), m, 5, seed).unwrap();
        for p in 0..5 {
            for j in 0..m {
                let (b, db) = (ps.brownian(p, j), ps.increments(p, j));
                prop_assert_eq!(b[0], 0.0);
                prop_assert_eq!(ps.fractional(p, j)[0], 0.0);
                let mut acc = 0.0;
                for k in 0..n {
                    acc += db[k];
                    prop_assert!(close(b[k + 1], acc, 1e-12));
                }
            }
        }
        let again = generate_mixed(grid, Hurst::new(0.7).unwrap(), m, 5, seed).unwrap();
        for p in 0..5 {
            prop_assert_eq!(again.fractional(p, 0), ps.fractional(p, 0));
        }
    }

    #[test]
    fn gamma_star_is_linear(h in hurst(), a in -3.0f64..3.0, b in -3.0f64..3.0, c in -2.0f64..2.0) {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let hh = Hurst::new(h).unwrap();
        let f = GridFunction::from_fn(grid, |t| 1.0 + c * t);
        let g = GridFunction::from_fn(grid, |t| (3.0 * t).cos());
        let lhs = gamma_star(&f.combine(a, &g, b).unwrap(), hh);
        let (gf, gg) = (gamma_star(&f, hh), gamma_star(&g, hh));
        for k in 0..=32 {
            let want = a * gf.values()[k] + b * gg.values()[k];
            prop_assert!(close(lhs.values()[k], want, 1e-9));
        }
    }

    #[test]
    fn phi_norm_is_a_quadratic_form(h in hurst(), a in -3.0f64..3.0, c in -2.0f64..2.0) {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let hh = Hurst::new(h).unwrap();
        let f = GridFunction::from_fn(grid, |t| 1.0 + c * t);
        let g = GridFunction::from_fn(grid, |t| (5.0 * t).sin());
        let nf = phi_norm_sq(&f, hh);
        prop_assert!(nf >= 0.0);
        prop_assert!(close(phi_norm_sq(&f.combine(a, &f, 0.0).unwrap(), hh), a * a * nf, 1e-10));
        // Parallelogram law.
        let plus = phi_norm_sq(&f.combine(1.0, &g, 1.0).unwrap(), hh);
        let minus = phi_norm_sq(&f.combine(1.0, &g, -1.0).unwrap(), hh);
        prop_assert!(close(plus + minus, 2.0 * nf + 2.0 * phi_norm_sq(&g, hh), 1e-10));
    }

    #[test]
    fn euler_without_fractional_noise_is_euler_maruyama(
        a in -2.0f64..2.0, c in -1.0f64..1.0, s in -1.0f64..1.0, x0 in -2.0f64..2.0, seed in any::<u64>()
    ) {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let ps = generate_mixed(grid, Hurst::new(0.8).unwrap(), 1, 3, seed).unwrap();
        let model = LinearModel::new("em", Affine::new(a, 0.0, c), vec![Affine::new(s, 0.0, 0.0)], vec![Affine::default()]).unwrap();
        let x = euler_mixed(&model, &ControlProcess::zero(&grid), x0, &ps).unwrap();
        for p in 0..3 {
            let mut want = x0;
            for k in 0..20 {
                prop_assert!(close(x.value(p, k), want, 1e-12));
                want += (a * want + c) * grid.dt() + s * want * ps.increments(p, 0)[k];
            }
            prop_assert!(close(x.value(p, 20), want, 1e-12));
        }
    }

    #[test]
    fn lq_cost_is_nonnegative(u in -3.0f64..3.0, nn in -0.5f64..0.5, seed in any::<u64>()) {
        let spec = LqSpec { n: nn.into(), ..LqSpec::brownian_fixture() };
        let ps = generate_mixed(TimeGrid::new(1.0, 16).unwrap(), Hurst::new(0.75).unwrap(), 1, 20, seed).unwrap();
        let j = lq_cost(&spec, &ControlProcess::deterministic(ps.grid(), |_| u), &ps).unwrap();
        prop_assert!(j.mean >= 0.0);
    }

    #[test]
    fn time_functions_evaluate_their_formulas(
        off in -2.0f64..2.0, amp in -2.0f64..2.0, freq in 0.0f64..3.0, phase in -3.0f64..3.0, t in 0.0f64..2.0
    ) {
        let tau = std::f64::consts::TAU;
        prop_assert_eq!(TimeFn::constant(off).eval(t), off);
        let affine = TimeFn::Affine { a: off, b: amp };
        prop_assert!(close(affine.eval(t), off + amp * t, 1e-15));
        let (sin, cos) = (
            TimeFn::Sin { offset: off, amplitude: amp, frequency: freq, phase },
            TimeFn::Cos { offset: off, amplitude: amp, frequency: freq, phase },
        );
        let (s, c) = (sin.eval(t), cos.eval(t));
        prop_assert!(close(s, off + amp * (tau * freq * t + phase).sin(), 1e-14));
        prop_assert!(close(c, off + amp * (tau * freq * t + phase).cos(), 1e-14));
    }

    #[test]
    fn config_hash_is_stable(seed in any::<u32>(), n in (4usize..250).prop_map(|k| 4 * k), h in hurst()) {
        let text = format!("name = \"p\"\nseed = {seed}\nn_steps = {n}\nhurst = {h}\n");
        let cfg = RunConfig::parse(&text).unwrap();
        let round = RunConfig::parse(&cfg.canonical()).unwrap();
        prop_assert_eq!(cfg.hash(), round.hash());
        prop_assert_eq!(cfg.hash(), RunConfig::parse(&text).unwrap().hash());
        let other = RunConfig::parse(&format!("name = \"p\"\nseed = {}\nn_steps = {n}\nhurst = {h}\n", seed as u64 + 1)).unwrap();
        prop_assert_ne!(cfg.hash(), other.hash());
    }
}
