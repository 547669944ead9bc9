//! Quadrature helpers: adaptive Gauss–Kronrod for smooth integrands and
//! closed-form moments for product integration against weakly singular
//! power kernels.

// 7-point Gauss / 15-point Kronrod nodes on [-1, 1] (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) integration of `f` over `[a, b]`.
///
/// Bisects panels until the Kronrod/Gauss difference on each panel is below
/// its share of `max(abs_tol, rel_tol * |total|)`. Panel depth is capped, so
/// the routine always terminates and returns its best estimate.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (whole, err) = kronrod15(&f, a, b);
    let mut stack = vec![(a, b, whole, err, 0u32)];
    let mut total = 0.0;
    let width = (b - a).abs();
    while let Some((lo, hi, est, err, depth)) = stack.pop() {
        let tol = abs_tol.max(rel_tol * whole.abs()) * ((hi - lo).abs() / width);
        if err <= tol || depth >= 48 {
            total += est;
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let (l, le) = kronrod15(&f, lo, mid);
        let (r, re) = kronrod15(&f, mid, hi);
        stack.push((lo, mid, l, le, depth + 1));
        stack.push((mid, hi, r, re, depth + 1));
    }
    total
}

/// `∫_a^b (t - s)^p ds` for `a ≤ b ≤ t`, with `p > -1` whenever `b = t`.
pub fn backward_power_moment(a: f64, b: f64, t: f64, p: f64) -> f64 {
    let q = p + 1.0;
    ((t - a).powf(q) - (t - b).powf(q)) / q
}

/// `∫_a^b (u - t)^p du` for `t ≤ a ≤ b`, with `p > -1` whenever `a = t`.
pub fn forward_power_moment(a: f64, b: f64, t: f64, p: f64) -> f64 {
    let q = p + 1.0;
    ((b - t).powf(q) - (a - t).powf(q)) / q
}

/// `∫_a^b (u - t)^p ℓ(u) du` where `ℓ` is the linear interpolant through
/// `(a, la)` and `(b, lb)`, `t ≤ a < b`.
pub fn forward_power_linear(a: f64, b: f64, t: f64, p: f64, la: f64, lb: f64) -> f64 {
    let slope = (lb - la) / (b - a);
    // ℓ(u) = la - slope·(a - t) + slope·(u - t)
    let m0 = forward_power_moment(a, b, t, p);
    let m1 = forward_power_moment(a, b, t, p + 1.0);
    (la - slope * (a - t)) * m0 + slope * m1
}

/// Integrate `∫_0^T w(t) h(t) dt` with `w(t) = t^p` integrated exactly per
/// cell and `h` sampled at cell midpoints (product midpoint rule).
pub fn product_midpoint_origin<F: Fn(f64) -> f64>(h: F, horizon: f64, n: usize, p: f64) -> f64 {
    let dt = horizon / n as f64;
    (0..n)
        .map(|i| {
            let a = i as f64 * dt;
            let b = a + dt;
            let w = (b.powf(p + 1.0) - a.powf(p + 1.0)) / (p + 1.0);
            w * h(a + 0.5 * dt)
        })
        .sum()
}
