//! The linear-quadratic problem
//! `dX = (A X + Ã u)dt + (M X + M̃ u)dB + N X dB^H`,
//! `J = ½E[∫(Q X² + R u²)dt + G X_T²]`: Picard iteration on the first-order
//! condition, a Riccati oracle for `N ≡ 0`, and numerical optimality checks.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{estimate_p, estimate_q_formula, AdjointEstimate, AdjointProblem, CostModel, Reference};
use crate::error::{Error, Result};
use crate::fbm::{PathSet, TimeGrid};
use crate::rng::{stream, StreamDomain};
use crate::sde::{euler_mixed, CoefficientModel, ControlProcess, PolyFeedback, StatePath};
use crate::stats::{pairwise_sum, MeanSe};

/// Built-in coefficient functions of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFn {
    Const { value: f64 },
    /// `a + b t`
    Affine { a: f64, b: f64 },
    /// `offset + amplitude · sin(2π frequency t + phase)`
    Sin { offset: f64, amplitude: f64, frequency: f64, phase: f64 },
    /// `offset + amplitude · cos(2π frequency t + phase)`
    Cos { offset: f64, amplitude: f64, frequency: f64, phase: f64 },
}

impl TimeFn {
    pub fn constant(value: f64) -> Self {
        Self::Const { value }
    }

    pub fn eval(&self, t: f64) -> f64 {
        use std::f64::consts::TAU;
        match *self {
            Self::Const { value } => value,
            Self::Affine { a, b } => a + b * t,
            Self::Sin { offset, amplitude, frequency, phase } => offset + amplitude * (TAU * frequency * t + phase).sin(),
            Self::Cos { offset, amplitude, frequency, phase } => offset + amplitude * (TAU * frequency * t + phase).cos(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Self::Const { value } => value == 0.0,
            Self::Affine { a, b } => a == 0.0 && b == 0.0,
            Self::Sin { offset, amplitude, .. } | Self::Cos { offset, amplitude, .. } => offset == 0.0 && amplitude == 0.0,
        }
    }
}

impl From<f64> for TimeFn {
    fn from(value: f64) -> Self {
        Self::Const { value }
    }
}

/// Problem data; coefficients are functions of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqSpec {
    pub a: TimeFn,
    pub a_tilde: TimeFn,
    pub m: TimeFn,
    pub m_tilde: TimeFn,
    pub n: TimeFn,
    pub q: TimeFn,
    pub r: TimeFn,
    pub g: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl LqSpec {
    /// `A = −1, Ã = 1, M = 0.2, M̃ = 0, N = 0, Q = R = G = 1, x0 = 1, T = 1`.
    pub fn brownian_fixture() -> Self {
        Self {
            a: (-1.0).into(),
            a_tilde: 1.0.into(),
            m: 0.2.into(),
            m_tilde: 0.0.into(),
            n: 0.0.into(),
            q: 1.0.into(),
            r: 1.0.into(),
            g: 1.0,
            x0: 1.0,
            horizon: 1.0,
        }
    }

    /// The Brownian fixture with `N = 0.3`.
    pub fn mixed_fixture() -> Self {
        Self { n: 0.3.into(), ..Self::brownian_fixture() }
    }

    /// Check `Q ≥ 0`, `R > 0` on the grid and `G > 0`; returns `δ = min R`.
    pub fn validate(&self, grid: &TimeGrid) -> Result<f64> {
        if !(self.g > 0.0) {
            return Err(Error::InvalidSpec(format!("G must be positive, got {}", self.g)));
        }
        if (grid.horizon() - self.horizon).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "grid horizon {} differs from the problem horizon {}",
                grid.horizon(),
                self.horizon
            )));
        }
        let mut delta = f64::INFINITY;
        for t in grid.nodes() {
            let (q, r) = (self.q.eval(t), self.r.eval(t));
            if !(q >= 0.0) {
                return Err(Error::InvalidSpec(format!("Q({t}) = {q} is negative")));
            }
            if !(r > 0.0) {
                return Err(Error::InvalidSpec(format!("R({t}) = {r} is not positive")));
            }
            delta = delta.min(r);
        }
        Ok(delta)
    }

    pub fn model(&self) -> LqModel {
        LqModel { spec: self.clone() }
    }

    pub fn cost(&self) -> LqCost {
        LqCost { q: self.q, r: self.r, g: self.g }
    }
}

/// The state equation of an [`LqSpec`] as a one-driver coefficient model.
#[derive(Debug, Clone)]
pub struct LqModel {
    spec: LqSpec,
}

impl CoefficientModel for LqModel {
    fn id(&self) -> String {
        "lq".into()
    }
    fn drivers(&self) -> usize {
        1
    }
    fn b(&self, t: f64, x: f64, u: f64) -> f64 {
        self.spec.a.eval(t) * x + self.spec.a_tilde.eval(t) * u
    }
    fn b_x(&self, t: f64, _x: f64, _u: f64) -> f64 {
        self.spec.a.eval(t)
    }
    fn b_u(&self, t: f64, _x: f64, _u: f64) -> f64 {
        self.spec.a_tilde.eval(t)
    }
    fn sigma(&self, _j: usize, t: f64, x: f64, u: f64) -> f64 {
        self.spec.m.eval(t) * x + self.spec.m_tilde.eval(t) * u
    }
    fn sigma_x(&self, _j: usize, t: f64, _x: f64, _u: f64) -> f64 {
        self.spec.m.eval(t)
    }
    fn sigma_u(&self, _j: usize, t: f64, _x: f64, _u: f64) -> f64 {
        self.spec.m_tilde.eval(t)
    }
    fn gamma(&self, _j: usize, t: f64, x: f64, _u: f64) -> f64 {
        self.spec.n.eval(t) * x
    }
    fn gamma_x(&self, _j: usize, t: f64, _x: f64, _u: f64) -> f64 {
        self.spec.n.eval(t)
    }
    fn gamma_u(&self, _j: usize, _t: f64, _x: f64, _u: f64) -> f64 {
        0.0
    }
    fn lipschitz(&self) -> f64 {
        let grid = TimeGrid::new(self.spec.horizon, 256).expect("positive horizon");
        grid.nodes()
            .into_iter()
            .map(|t| {
                let s = &self.spec;
                [s.a, s.a_tilde, s.m, s.m_tilde, s.n].iter().map(|f| f.eval(t).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
    fn holder_exponent(&self) -> f64 {
        1.0
    }
    fn is_linear_in_state(&self) -> bool {
        true
    }
}

/// `f = ½(Q(t) x² + R(t) u²)`, `g = ½ G x²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqCost {
    pub q: TimeFn,
    pub r: TimeFn,
    pub g: f64,
}

impl CostModel for LqCost {
    fn f(&self, t: f64, x: f64, u: f64) -> f64 {
        0.5 * (self.q.eval(t) * x * x + self.r.eval(t) * u * u)
    }
    fn f_x(&self, t: f64, x: f64, _u: f64) -> f64 {
        self.q.eval(t) * x
    }
    fn f_u(&self, t: f64, _x: f64, u: f64) -> f64 {
        self.r.eval(t) * u
    }
    fn f_xx(&self, t: f64, _x: f64, _u: f64) -> f64 {
        self.q.eval(t)
    }
    fn f_xu(&self, _t: f64, _x: f64, _u: f64) -> f64 {
        0.0
    }
    fn g(&self, x: f64) -> f64 {
        0.5 * self.g * x * x
    }
    fn g_x(&self, x: f64) -> f64 {
        self.g * x
    }
    fn g_xx(&self, _x: f64) -> f64 {
        self.g
    }
}

/// Pathwise cost `Σ_{k<n} f(t_k, X_k, u_k) Δ + g(X_T)` (left-point).
pub fn pathwise_costs(cost: &dyn CostModel, state: &StatePath) -> Vec<f64> {
    let grid = state.grid;
    let (n, dt) = (grid.n_steps(), grid.dt());
    (0..state.n_paths)
        .map(|p| {
            let running: f64 = (0..n).map(|k| cost.f(grid.node(k), state.value(p, k), state.control(p, k)) * dt).sum();
            running + cost.g(state.value(p, n))
        })
        .collect()
}

/// `J(u)` with its Monte Carlo standard error.
pub fn lq_cost(spec: &LqSpec, u: &ControlProcess, paths: &PathSet) -> Result<MeanSe> {
    let state = euler_mixed(&spec.model(), u, spec.x0, paths)?;
    Ok(MeanSe::of(&pathwise_costs(&spec.cost(), &state)))
}

/// Solution of the Riccati equation on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    /// `P(t_k)`.
    pub p: Vec<f64>,
    /// Feedback gain `K(t_k)`, `u = −K x`.
    pub gain: Vec<f64>,
    /// `½ P(0) x0²`.
    pub cost: f64,
}

impl RiccatiSolution {
    pub fn feedback(&self) -> PolyFeedback {
        PolyFeedback::linear(&self.gain.iter().map(|k| -k).collect::<Vec<_>>())
    }
}

/// Guard for the backward Riccati sweep.
const RICCATI_LIMIT: f64 = 1e12;

/// `−Ṗ = 2AP + M²P + Q − (ÃP + M̃MP)² / (R + M̃²P)`, `P(T) = G`, by RK4
/// with `substeps` steps per grid cell. Requires `N ≡ 0`.
pub fn riccati_oracle(spec: &LqSpec, grid: &TimeGrid, substeps: usize) -> Result<RiccatiSolution> {
    if !spec.n.is_zero() {
        return Err(Error::InvalidSpec("the Riccati oracle covers only N ≡ 0".into()));
    }
    spec.validate(grid)?;
    let rhs = |t: f64, p: f64| {
        let (a, at, m, mt) = (spec.a.eval(t), spec.a_tilde.eval(t), spec.m.eval(t), spec.m_tilde.eval(t));
        let s = at * p + mt * m * p;
        // dP/dt
        -(2.0 * a * p + m * m * p + spec.q.eval(t) - s * s / (spec.r.eval(t) + mt * mt * p))
    };
    let gain = |t: f64, p: f64| {
        let (at, m, mt) = (spec.a_tilde.eval(t), spec.m.eval(t), spec.m_tilde.eval(t));
        (at * p + mt * m * p) / (spec.r.eval(t) + mt * mt * p)
    };
    let n = grid.n_steps();
    let h = -grid.dt() / substeps as f64;
    let mut p = vec![0.0; n + 1];
    p[n] = spec.g;
    let mut cur = spec.g;
    for k in (0..n).rev() {
        let mut t = grid.node(k + 1);
        for _ in 0..substeps {
            let k1 = rhs(t, cur);
            let k2 = rhs(t + 0.5 * h, cur + 0.5 * h * k1);
            let k3 = rhs(t + 0.5 * h, cur + 0.5 * h * k2);
            let k4 = rhs(t + h, cur + h * k3);
            cur += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
            if !cur.is_finite() || cur.abs() > RICCATI_LIMIT {
                return Err(Error::RiccatiBlowup { t, value: cur });
            }
        }
        p[k] = cur;
    }
    let gains = (0..=n).map(|k| gain(grid.node(k), p[k])).collect();
    Ok(RiccatiSolution { grid: *grid, cost: 0.5 * p[0] * spec.x0 * spec.x0, p, gain: gains })
}

/// Starting control for the Picard iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialControl {
    Constant { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub theta: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub degree: usize,
    pub init: InitialControl,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { theta: 0.5, max_iter: 50, tol: 1e-3, degree: 2, init: InitialControl::Constant { value: 0.0 } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `(E Σ_k (u_{new} − u_{old})² Δ)^{1/2}` along the current state.
    pub change: f64,
    pub cost: MeanSe,
}

#[derive(Debug, Clone)]
pub struct LqSolution {
    pub control: ControlProcess,
    pub reference: Reference,
    pub adjoint: AdjointEstimate,
    pub cost: MeanSe,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
    pub delta: f64,
}

impl LqSolution {
    /// CSV `iteration,change,J,J_stderr`.
    pub fn write_log_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,change,J,J_stderr")?;
        for r in &self.log {
            writeln!(out, "{},{},{},{}", r.iteration, r.change, r.cost.mean, r.cost.stderr)?;
        }
        Ok(())
    }

    /// CSV `node,t,c0,c1,...` of the feedback polynomial per node.
    pub fn write_control_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let ControlProcess::Feedback(fb) = &self.control else {
            return writeln!(out, "node,t");
        };
        let width = (0..fb.n_nodes()).map(|k| fb.coeffs(k).len()).max().unwrap_or(1);
        let mut header = String::from("node,t");
        for d in 0..width {
            let _ = write!(header, ",c{d}");
        }
        writeln!(out, "{header}")?;
        let grid = self.reference.state.grid;
        for k in 0..fb.n_nodes() {
            write!(out, "{},{}", k, grid.node(k))?;
            for d in 0..width {
                write!(out, ",{}", fb.coeffs(k).get(d).copied().unwrap_or(0.0))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn mean_square_change(old: &ControlProcess, new: &ControlProcess, state: &StatePath) -> f64 {
    let grid = state.grid;
    let (n, dt) = (grid.n_steps(), grid.dt());
    let per_path: Vec<f64> = (0..state.n_paths)
        .map(|p| {
            (0..n)
                .map(|k| {
                    let x = state.value(p, k);
                    (new.value(p, k, x) - old.value(p, k, x)).powi(2) * dt
                })
                .sum()
        })
        .collect();
    (pairwise_sum(&per_path) / state.n_paths as f64).sqrt()
}

fn initial_feedback(init: InitialControl, nodes: usize) -> PolyFeedback {
    match init {
        InitialControl::Constant { value } => PolyFeedback::new(vec![vec![value]; nodes]),
    }
}

/// Control suggested by the first-order condition at the current estimate:
/// `−R⁻¹(b_u p + Σ σ_u q)` as a polynomial feedback law per node.
fn first_order_feedback(
    model: &dyn CoefficientModel,
    cost: &LqCost,
    reference: &Reference,
    est: &AdjointEstimate,
) -> PolyFeedback {
    let grid = est.grid;
    let n = grid.n_steps();
    let lin = &reference.lin;
    let coeffs = (0..=n)
        .map(|k| {
            let t = grid.node(k);
            let mut c = match &est.p_next_fits[k] {
                Some(fit) => fit.raw_coefficients(),
                None => vec![0.0, cost.g],
            };
            c.iter_mut().for_each(|v| *v *= lin.bu(0, k));
            if let Some(q_fits) = &est.q_fits {
                for j in 0..model.drivers() {
                    let su = lin.su(0, j, k);
                    if su == 0.0 {
                        continue;
                    }
                    let sx = lin.sx(0, j, k);
                    let qraw = q_fits[j * grid.n_nodes() + k].raw_coefficients();
                    let praw = match &est.p_fits[k] {
                        Some(fit) => fit.raw_coefficients(),
                        None => vec![0.0, cost.g],
                    };
                    let len = c.len().max(qraw.len()).max(praw.len());
                    c.resize(len, 0.0);
                    for d in 0..len {
                        let qd = qraw.get(d).copied().unwrap_or(0.0) - sx * praw.get(d).copied().unwrap_or(0.0);
                        c[d] += su * qd;
                    }
                }
            }
            let r = cost.r.eval(t);
            c.into_iter().map(|v| -v / r).collect()
        })
        .collect();
    PolyFeedback::new(coeffs)
}

fn needs_q(model: &dyn CoefficientModel, grid: &TimeGrid) -> bool {
    grid.nodes().into_iter().any(|t| (0..model.drivers()).any(|j| model.sigma_u(j, t, 0.0, 0.0) != 0.0))
}

/// Damped Picard iteration `u ← (1−θ)u − θR⁻¹(b_u p + Σσ_u q)` for any
/// linear-in-state model with the quadratic cost of an LQ problem.
pub fn picard_solve(
    model: &dyn CoefficientModel,
    cost: &LqCost,
    x0: f64,
    delta: f64,
    paths: &PathSet,
    opts: &PicardOptions,
) -> Result<LqSolution> {
    if !(opts.theta > 0.0 && opts.theta <= 1.0) {
        return Err(Error::Domain(format!("damping θ must lie in (0, 1], got {}", opts.theta)));
    }
    let grid = *paths.grid();
    let mut fb = initial_feedback(opts.init, grid.n_nodes());
    let mut log = Vec::new();
    let mut converged = false;
    for iteration in 1..=opts.max_iter {
        let (next, change, j) = picard_step(model, cost, x0, &fb, paths, opts)?;
        log.push(IterationRecord { iteration, change, cost: j });
        fb = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    let control = ControlProcess::Feedback(fb);
    let problem = AdjointProblem { model, cost, control: &control, x0, paths };
    let reference = problem.reference()?;
    let mut adjoint = estimate_p(&problem, &reference, opts.degree)?;
    estimate_q_formula(&problem, &reference, &mut adjoint)?;
    let cost_est = MeanSe::of(&pathwise_costs(cost, &reference.state));
    Ok(LqSolution { control, reference, adjoint, cost: cost_est, log, converged, delta })
}

/// One damped Picard update from the feedback `fb`: returns the new
/// feedback, its mean L² distance from `fb` along the current state, and
/// `J(fb)`.
pub fn picard_step(
    model: &dyn CoefficientModel,
    cost: &LqCost,
    x0: f64,
    fb: &PolyFeedback,
    paths: &PathSet,
    opts: &PicardOptions,
) -> Result<(PolyFeedback, f64, MeanSe)> {
    let control = ControlProcess::Feedback(fb.clone());
    let problem = AdjointProblem { model, cost, control: &control, x0, paths };
    let reference = problem.reference()?;
    let mut est = estimate_p(&problem, &reference, opts.degree)?;
    if needs_q(model, paths.grid()) {
        estimate_q_formula(&problem, &reference, &mut est)?;
    }
    let target = first_order_feedback(model, cost, &reference, &est);
    let next = fb.combine(1.0 - opts.theta, &target, opts.theta);
    let change = mean_square_change(&control, &ControlProcess::Feedback(next.clone()), &reference.state);
    Ok((next, change, MeanSe::of(&pathwise_costs(cost, &reference.state))))
}

/// [`picard_solve`] for an [`LqSpec`] after validating it.
pub fn lq_picard_solve(spec: &LqSpec, paths: &PathSet, opts: &PicardOptions) -> Result<LqSolution> {
    let delta = spec.validate(paths.grid())?;
    picard_solve(&spec.model(), &spec.cost(), spec.x0, delta, paths, opts)
}

/// Mean L² distance between two controls along a common state.
pub fn control_distance(a: &ControlProcess, b: &ControlProcess, state: &StatePath) -> f64 {
    mean_square_change(a, b, state)
}

/// Random adapted directions
/// `v_k = c₀ + c₁ sin(2π t_k) + c₂ cos(2π t_k) + c₃ B(t_k)` with coefficients
/// uniform in `[−1, 1]`.
pub fn random_directions(paths: &PathSet, count: usize, seed: u64) -> Result<Vec<ControlProcess>> {
    use std::f64::consts::TAU;
    (0..count)
        .map(|i| {
            let mut rng: ChaCha8Rng = stream(seed, StreamDomain::Directions, i, 0);
            let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            ControlProcess::adapted(paths, move |_, t, prefix| {
                c[0] + c[1] * (TAU * t).sin() + c[2] * (TAU * t).cos() + c[3] * prefix.b(0)
            })
        })
        .collect()
}

/// One `(direction, ε)` cell of an optimality sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub direction: usize,
    pub epsilon: f64,
    /// `J(u* + εv) − J(u*)`, common random numbers.
    pub difference: MeanSe,
    /// `[J(u* + εv) − J(u* − εv)] / 2ε`.
    pub derivative: MeanSe,
}

impl SweepRow {
    pub fn difference_ok(&self) -> bool {
        self.difference.mean >= -3.0 * self.difference.stderr
    }

    pub fn derivative_ok(&self) -> bool {
        self.derivative.mean.abs() <= 3.0 * self.derivative.stderr
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "direction,epsilon,difference,difference_stderr,derivative,derivative_stderr")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.direction, r.epsilon, r.difference.mean, r.difference.stderr, r.derivative.mean, r.derivative.stderr
        )?;
    }
    Ok(())
}

fn costs_under(model: &dyn CoefficientModel, cost: &LqCost, x0: f64, u: &ControlProcess, paths: &PathSet) -> Result<(StatePath, Vec<f64>)> {
    let state = euler_mixed(model, u, x0, paths)?;
    let c = pathwise_costs(cost, &state);
    Ok((state, c))
}

fn diff_stats(a: &[f64], b: &[f64], scale: f64) -> MeanSe {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * scale).collect();
    MeanSe::of(&d)
}

/// Perturb `u*` (realized open-loop along its own state) in each direction.
pub fn optimality_sweep(
    model: &dyn CoefficientModel,
    cost: &LqCost,
    x0: f64,
    u_star: &ControlProcess,
    directions: &[ControlProcess],
    epsilons: &[f64],
    paths: &PathSet,
) -> Result<Vec<SweepRow>> {
    let (x_star, j_star) = costs_under(model, cost, x0, u_star, paths)?;
    let base = u_star.realize(&x_star)?;
    let mut rows = Vec::new();
    for (i, v) in directions.iter().enumerate() {
        for &eps in epsilons {
            let up = base.perturbed(v, eps, &x_star)?;
            let down = base.perturbed(v, -eps, &x_star)?;
            let (_, j_up) = costs_under(model, cost, x0, &up, paths)?;
            let (_, j_down) = costs_under(model, cost, x0, &down, paths)?;
            rows.push(SweepRow {
                direction: i,
                epsilon: eps,
                difference: diff_stats(&j_up, &j_star, 1.0),
                derivative: diff_stats(&j_up, &j_down, 0.5 / eps),
            });
        }
    }
    Ok(rows)
}

/// Outcome of [`convexity_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    /// `J(u₁) + J(u₂) − 2J((u₁+u₂)/2) − (δ/4) E∫|u₁−u₂|²`, pathwise.
    pub margin: MeanSe,
    /// `½(J(u₁) + J(u₂)) − J((u₁+u₂)/2) − (δ/4) E∫|u₁−u₂|²`. Twice as
    /// demanding on the control gap; for quadratic costs the exact value is
    /// `(1/8)E∫R|u₁−u₂|²` plus the state part, so it can fail.
    pub halved_margin: MeanSe,
    /// `E∫|u₁ − u₂|² dt`.
    pub control_gap: f64,
    /// `max |X_{mid} − (X₁ + X₂)/2|` over paths and nodes.
    pub midpoint_state_error: f64,
    pub delta: f64,
}

impl ConvexityReport {
    pub fn holds(&self) -> bool {
        self.margin.mean >= -3.0 * self.margin.stderr
    }

    pub fn halved_holds(&self) -> bool {
        self.halved_margin.mean >= -3.0 * self.halved_margin.stderr
    }
}

/// Strong convexity of `J` along the segment between two open-loop controls.
pub fn convexity_check(
    model: &dyn CoefficientModel,
    cost: &LqCost,
    x0: f64,
    delta: f64,
    u1: &ControlProcess,
    u2: &ControlProcess,
    paths: &PathSet,
) -> Result<ConvexityReport> {
    if !u1.is_open_loop() || !u2.is_open_loop() {
        return Err(Error::Domain("convexity check needs open-loop controls".into()));
    }
    let (x1, j1) = costs_under(model, cost, x0, u1, paths)?;
    let (x2, j2) = costs_under(model, cost, x0, u2, paths)?;
    let mid = u1.perturbed(&difference_table(u2, u1, &x1)?, 0.5, &x1)?;
    let (xm, jm) = costs_under(model, cost, x0, &mid, paths)?;
    let grid = *paths.grid();
    let (n, dt) = (grid.n_steps(), grid.dt());
    let gaps: Vec<f64> = (0..paths.n_paths())
        .map(|p| (0..n).map(|k| (x1.control(p, k) - x2.control(p, k)).powi(2) * dt).sum())
        .collect();
    let margins: Vec<f64> = (0..paths.n_paths())
        .map(|p| j1[p] + j2[p] - 2.0 * jm[p] - 0.25 * delta * gaps[p])
        .collect();
    let halved: Vec<f64> = (0..paths.n_paths())
        .map(|p| 0.5 * (j1[p] + j2[p]) - jm[p] - 0.25 * delta * gaps[p])
        .collect();
    let midpoint_state_error = x1
        .values
        .iter()
        .zip(&x2.values)
        .zip(&xm.values)
        .map(|((a, b), m)| (m - 0.5 * (a + b)).abs())
        .fold(0.0, f64::max);
    Ok(ConvexityReport {
        margin: MeanSe::of(&margins),
        halved_margin: MeanSe::of(&halved),
        control_gap: pairwise_sum(&gaps) / paths.n_paths() as f64,
        midpoint_state_error,
        delta,
    })
}

fn difference_table(a: &ControlProcess, b: &ControlProcess, state: &StatePath) -> Result<ControlProcess> {
    let nn = state.grid.n_nodes();
    let mut values = Vec::with_capacity(state.n_paths * nn);
    for p in 0..state.n_paths {
        for k in 0..nn {
            values.push(a.value(p, k, f64::NAN) - b.value(p, k, f64::NAN));
        }
    }
    Ok(ControlProcess::Table { n_paths: state.n_paths, n_nodes: nn, values })
}

/// A one-driver model re-expressed over two independent drivers `(B, W)`:
/// the Itô part moves to `W` and the fractional part stays on `B^H`, i.e.
/// `σ̃ = (0, σ)`, `γ̃ = (γ, 0)`.
#[derive(Debug, Clone)]
pub struct StackedModel<M> {
    inner: M,
}

/// Build the stacked two-driver form of a one-driver model.
pub fn independent_bm_scenario<M: CoefficientModel>(inner: M) -> Result<StackedModel<M>> {
    if inner.drivers() != 1 {
        return Err(Error::Domain(format!("stacking needs a one-driver model, got {}", inner.drivers())));
    }
    Ok(StackedModel { inner })
}

impl<M: CoefficientModel> CoefficientModel for StackedModel<M> {
    fn id(&self) -> String {
        format!("stacked({})", self.inner.id())
    }
    fn drivers(&self) -> usize {
        2
    }
    fn b(&self, t: f64, x: f64, u: f64) -> f64 {
        self.inner.b(t, x, u)
    }
    fn b_x(&self, t: f64, x: f64, u: f64) -> f64 {
        self.inner.b_x(t, x, u)
    }
    fn b_u(&self, t: f64, x: f64, u: f64) -> f64 {
        self.inner.b_u(t, x, u)
    }
    fn sigma(&self, j: usize, t: f64, x: f64, u: f64) -> f64 {
        if j == 1 { self.inner.sigma(0, t, x, u) } else { 0.0 }
    }
    fn sigma_x(&self, j: usize, t: f64, x: f64, u: f64) -> f64 {
        if j == 1 { self.inner.sigma_x(0, t, x, u) } else { 0.0 }
    }
    fn sigma_u(&self, j: usize, t: f64, x: f64, u: f64) -> f64 {
        if j == 1 { self.inner.sigma_u(0, t, x, u) } else { 0.0 }
    }
    fn gamma(&self, j: usize, t: f64, x: f64, u: f64) -> f64 {
        if j == 0 { self.inner.gamma(0, t, x, u) } else { 0.0 }
    }
    fn gamma_x(&self, j: usize, t: f64, x: f64, u: f64) -> f64 {
        if j == 0 { self.inner.gamma_x(0, t, x, u) } else { 0.0 }
    }
    fn gamma_u(&self, j: usize, t: f64, x: f64, u: f64) -> f64 {
        if j == 0 { self.inner.gamma_u(0, t, x, u) } else { 0.0 }
    }
    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }
    fn holder_exponent(&self) -> f64 {
        self.inner.holder_exponent()
    }
    fn is_linear_in_state(&self) -> bool {
        self.inner.is_linear_in_state()
    }
}

/// Draw paths for `count` samples of an open-loop control with values
/// uniform in `[lo, hi]` per node, shared across paths (for convexity pairs).
pub fn random_deterministic_control(grid: &TimeGrid, lo: f64, hi: f64, seed: u64, index: usize) -> ControlProcess {
    let mut rng = stream(seed, StreamDomain::Auxiliary, index, 0);
    let values: Vec<f64> = (0..grid.n_nodes()).map(|_| rng.random_range(lo..hi)).collect();
    ControlProcess::Deterministic(values)
}

/// Seeded generator for ad-hoc draws outside the path streams.
pub fn auxiliary_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Path-parallel pathwise cost under many controls at once.
pub fn costs_for(model: &dyn CoefficientModel, cost: &LqCost, x0: f64, controls: &[ControlProcess], paths: &PathSet) -> Result<Vec<MeanSe>> {
    controls
        .par_iter()
        .map(|u| costs_under(model, cost, x0, u, paths).map(|(_, c)| MeanSe::of(&c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{generate_mixed, Hurst};

    fn paths(n: usize, n_paths: usize, seed: u64) -> PathSet {
        generate_mixed(TimeGrid::new(1.0, n).unwrap(), Hurst::new(0.75).unwrap(), 1, n_paths, seed).unwrap()
    }

    #[test]
    fn spec_validation() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        assert_eq!(LqSpec::brownian_fixture().validate(&grid).unwrap(), 1.0);
        let bad = LqSpec { r: 0.0.into(), ..LqSpec::brownian_fixture() };
        assert!(matches!(bad.validate(&grid), Err(Error::InvalidSpec(_))));
        let bad = LqSpec { q: (-0.1).into(), ..LqSpec::brownian_fixture() };
        assert!(bad.validate(&grid).is_err());
        let bad = LqSpec { g: 0.0, ..LqSpec::brownian_fixture() };
        assert!(bad.validate(&grid).is_err());
    }

    #[test]
    fn cost_without_dynamics_is_terminal_only() {
        let spec = LqSpec {
            a: 0.0.into(),
            m: 0.0.into(),
            n: 0.0.into(),
            q: 0.0.into(),
            g: 3.0,
            x0: 2.0,
            ..LqSpec::brownian_fixture()
        };
        let ps = paths(16, 10, 1);
        let j = lq_cost(&spec, &ControlProcess::zero(ps.grid()), &ps).unwrap();
        assert_eq!(j.mean, 6.0);
        assert_eq!(j.stderr, 0.0);
    }

    #[test]
    fn riccati_trivial_and_scalar_lqr() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let zero = LqSpec { q: 0.0.into(), ..LqSpec::brownian_fixture() };
        // G must stay positive; with Q = 0 and G tiny the value is tiny.
        let tiny = LqSpec { g: 1e-300, ..zero };
        let sol = riccati_oracle(&tiny, &grid, 4).unwrap();
        assert!(sol.cost < 1e-290 && sol.gain.iter().all(|k| k.abs() < 1e-290));
        // Deterministic LQR with A = 0, Ã = 1, Q = 0, R = 1: P(t) = G / (1 + G (T − t)).
        let lqr = LqSpec { a: 0.0.into(), m: 0.0.into(), q: 0.0.into(), g: 2.0, ..LqSpec::brownian_fixture() };
        let sol = riccati_oracle(&lqr, &grid, 8).unwrap();
        for (k, t) in grid.nodes().into_iter().enumerate() {
            assert!((sol.p[k] - 2.0 / (1.0 + 2.0 * (1.0 - t))).abs() < 1e-10);
        }
    }

    #[test]
    fn riccati_rejects_fractional_coupling() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        assert!(riccati_oracle(&LqSpec::mixed_fixture(), &grid, 4).is_err());
    }

    #[test]
    fn powerless_control_stays_zero() {
        let spec = LqSpec { a_tilde: 0.0.into(), m_tilde: 0.0.into(), ..LqSpec::brownian_fixture() };
        let ps = paths(16, 200, 2);
        let sol = lq_picard_solve(&spec, &ps, &PicardOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.log.len(), 1);
        let ControlProcess::Feedback(fb) = &sol.control else { panic!() };
        assert!((0..17).all(|k| fb.coeffs(k).iter().all(|c| *c == 0.0)));
    }

    #[test]
    fn zero_direction_has_zero_difference() {
        let spec = LqSpec::brownian_fixture();
        let ps = paths(16, 50, 3);
        let u = ControlProcess::deterministic(ps.grid(), |t| -0.5 * t);
        let rows = optimality_sweep(
            &spec.model(),
            &spec.cost(),
            spec.x0,
            &u,
            &[ControlProcess::zero(ps.grid())],
            &[0.1],
            &ps,
        )
        .unwrap();
        assert_eq!(rows[0].difference.mean, 0.0);
        assert_eq!(rows[0].derivative.mean, 0.0);
    }

    #[test]
    fn convexity_of_identical_controls_is_tight() {
        let spec = LqSpec::mixed_fixture();
        let ps = paths(16, 30, 4);
        let u = ControlProcess::deterministic(ps.grid(), |t| t.sin());
        let r = convexity_check(&spec.model(), &spec.cost(), spec.x0, 1.0, &u, &u, &ps).unwrap();
        assert!(r.margin.mean.abs() < 1e-12);
        assert_eq!(r.control_gap, 0.0);
    }

    #[test]
    fn stacked_model_with_no_ito_part_matches_direct() {
        let spec = LqSpec { m: 0.0.into(), ..LqSpec::mixed_fixture() };
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let h = Hurst::new(0.75).unwrap();
        let two = generate_mixed(grid, h, 2, 5, 9).unwrap();
        let one = generate_mixed(grid, h, 1, 5, 9).unwrap();
        let stacked = independent_bm_scenario(spec.model()).unwrap();
        let u = ControlProcess::deterministic(&grid, |t| t);
        let a = euler_mixed(&stacked, &u, 1.0, &two).unwrap();
        let b = euler_mixed(&spec.model(), &u, 1.0, &one).unwrap();
        // Dimension 0 of each path uses the same stream in both bundles.
        assert_eq!(a.values, b.values);
    }
}
