//! Reference solvers that do not run the two-timescale iteration: stationary
//! distributions, value iteration, nested game/control fixed points and
//! fixed-policy evaluation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    bellman_image_with, induced_transition, op_p, op_t, push_forward, tv_distance, tv_norm,
    Policy, ProbabilityVector, ProblemSpec, QTable,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Stationary {
    pub mu: ProbabilityVector,
    /// The linear system was numerically singular: the chain probably has
    /// several stationary distributions and `mu` is one of them.
    pub degenerate: bool,
    /// `||mu M - mu||_1`.
    pub residual: f64,
}

const DEGENERACY_RATIO: f64 = 1e-12;

fn l1_residual(mu: &[f64], m: &DMatrix<f64>) -> f64 {
    push_forward(mu, m)
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Power iteration on the lazy chain `(I + M) / 2`, which has the same
/// stationary distributions as `M` and is aperiodic.
fn lazy_power(m: &DMatrix<f64>, start: Vec<f64>, tol: f64, max_iters: usize) -> Vec<f64> {
    let mut mu = start;
    for _ in 0..max_iters {
        let next: Vec<f64> = push_forward(&mu, m)
            .iter()
            .zip(&mu)
            .map(|(p, c)| 0.5 * (p + c))
            .collect();
        let change: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        mu = next;
        if change < tol * 1e-2 {
            break;
        }
    }
    mu
}

/// Solves `mu M = mu`, `sum mu = 1` by least squares on the stacked system
/// `[M^T - I; 1^T] mu = [0; 1]`. A singular system (reducible chain) falls
/// back to power iteration and sets [`Stationary::degenerate`].
pub fn stationary_distribution(m: &DMatrix<f64>) -> Result<Stationary> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: m.ncols(),
        });
    }
    let mut a = DMatrix::zeros(n + 1, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = m[(j, i)] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n, j)] = 1.0;
    }
    let mut b = DVector::zeros(n + 1);
    b[n] = 1.0;

    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let degenerate = !(s_min > DEGENERACY_RATIO * s_max);

    let raw: Vec<f64> = if degenerate {
        log::warn!("stationary distribution is not unique (reducible chain)");
        lazy_power(m, vec![1.0 / n as f64; n], 1e-14, 1_000_000)
    } else {
        let sol = svd
            .solve(&b, DEGENERACY_RATIO * s_max)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        sol.iter().copied().collect()
    };
    let cleaned: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let mut mu = ProbabilityVector::normalized(cleaned)?;
    let mut residual = l1_residual(mu.as_slice(), m);
    if residual >= 1e-10 {
        let polished = lazy_power(m, mu.as_slice().to_vec(), 1e-14, 100_000);
        let candidate = ProbabilityVector::normalized(polished)?;
        let r = l1_residual(candidate.as_slice(), m);
        if r < residual {
            mu = candidate;
            residual = r;
        }
    }
    Ok(Stationary {
        mu,
        degenerate,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampedOptions {
    /// Initial damping in (0, 1]; halved when the residual rises twice in a
    /// row.
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for DampedOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-11,
            max_iters: 200_000,
        }
    }
}

/// Tracks a residual sequence and halves the damping after two consecutive
/// increases.
struct DampingControl {
    lambda: f64,
    last: f64,
    rises: u32,
}

impl DampingControl {
    fn new(lambda: f64) -> Self {
        Self {
            lambda,
            last: f64::INFINITY,
            rises: 0,
        }
    }

    fn observe(&mut self, residual: f64) {
        if residual > self.last {
            self.rises += 1;
            if self.rises >= 2 {
                self.lambda *= 0.5;
                self.rises = 0;
                log::debug!("residual oscillates; damping halved to {}", self.lambda);
            }
        } else {
            self.rises = 0;
        }
        self.last = residual;
    }
}

fn check_damping(d: f64) -> Result<()> {
    if !(d > 0.0 && d <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "damping must lie in (0, 1], got {d}"
        )));
    }
    Ok(())
}

/// Equilibrium distribution of the population playing the greedy policy of
/// `q`: `mu = mu P^{q, mu}`, with residual measured in l1.
pub fn mu_fixed_point(
    q: &QTable,
    spec: &ProblemSpec,
    opts: &DampedOptions,
) -> Result<ProbabilityVector> {
    mu_fixed_point_from(q, spec, ProbabilityVector::uniform(spec.n_states()), opts)
}

pub fn mu_fixed_point_from(
    q: &QTable,
    spec: &ProblemSpec,
    start: ProbabilityVector,
    opts: &DampedOptions,
) -> Result<ProbabilityVector> {
    spec.check_q(q)?;
    spec.check_mu(&start)?;
    check_damping(opts.damping)?;
    if !spec.kernel.depends_on_mu() {
        let m = induced_transition(q, &start, spec);
        return Ok(stationary_distribution(&m)?.mu);
    }
    let mut mu = start;
    let mut control = DampingControl::new(opts.damping);
    let mut history = Vec::new();
    for _ in 0..opts.max_iters {
        let m = induced_transition(q, &mu, spec);
        let pushed = push_forward(mu.as_slice(), &m);
        let residual: f64 = pushed
            .iter()
            .zip(mu.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        if history.len() < 1000 {
            history.push(residual);
        }
        if residual < opts.tol {
            return Ok(mu);
        }
        control.observe(residual);
        let lambda = control.lambda;
        let next = mu
            .as_slice()
            .iter()
            .zip(&pushed)
            .map(|(c, p)| (1.0 - lambda) * c + lambda * p)
            .collect();
        mu = ProbabilityVector::normalized(next)?;
    }
    Err(Error::NoConvergence {
        what: "distribution fixed point",
        iterations: opts.max_iters,
        residual: control.last,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellmanOptions {
    /// Bound on the distance to the exact fixed point.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for BellmanOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iters: 10_000_000,
        }
    }
}

/// Optimal Q for a frozen population `mu`, by value iteration from zero.
pub fn bellman_solve(mu: &ProbabilityVector, spec: &ProblemSpec, opts: &BellmanOptions) -> Result<QTable> {
    bellman_solve_from(mu, spec, spec.zero_q(), opts)
}

/// Value iteration from `start`. Stops once a step is smaller than
/// `tol (1 - exp(-gamma h))`, which bounds the error to the fixed point by
/// `tol`.
pub fn bellman_solve_from(
    mu: &ProbabilityVector,
    spec: &ProblemSpec,
    start: QTable,
    opts: &BellmanOptions,
) -> Result<QTable> {
    spec.check_mu(mu)?;
    spec.check_q(&start)?;
    let costs = spec.cost_table(mu);
    let kernel = spec.kernel.snapshot(mu);
    let discount = spec.discount();
    let threshold = opts.tol * (1.0 - discount);
    let mut q = start;
    let mut step = f64::INFINITY;
    for _ in 0..opts.max_iters {
        let next = bellman_image_with(&q, &costs, &kernel, spec.h, discount);
        step = next.sup_distance(&q)?;
        q = next;
        if step < threshold {
            return Ok(q);
        }
        if !step.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence {
        what: "value iteration",
        iterations: opts.max_iters,
        residual: step,
        history: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedOptions {
    /// Target for both stationary-point residuals: `||T||_inf` and
    /// `||P||_TV`.
    pub tol: f64,
    pub max_iters: usize,
    pub damping: f64,
    pub inner: DampedOptions,
    pub bellman: BellmanOptions,
}

impl Default for NestedOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 2_000,
            damping: 0.5,
            inner: DampedOptions::default(),
            bellman: BellmanOptions::default(),
        }
    }
}

/// A pair satisfying `T(Q, mu) = 0` and `P(Q, mu) = 0` up to the reported
/// residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub q: QTable,
    pub mu: ProbabilityVector,
    pub residual_t: f64,
    pub residual_p: f64,
    pub iterations: usize,
    /// `max(residual_t, residual_p)` after every outer iteration.
    pub history: Vec<f64>,
}

/// Sup-norm of `T` and TV-norm of `P` at `(q, mu)`.
pub fn stationary_residuals(q: &QTable, mu: &ProbabilityVector, spec: &ProblemSpec) -> (f64, f64) {
    (op_t(q, mu, spec).sup_norm(), tv_norm(&op_p(q, mu, spec)))
}

/// Game equilibrium: the population is the outer (slow) variable. Each outer
/// step solves the Bellman equation for the current `mu`, then moves `mu`
/// toward the equilibrium distribution of the resulting greedy policy.
pub fn mfg_solve(spec: &ProblemSpec, opts: &NestedOptions, mu0: ProbabilityVector) -> Result<FixedPoint> {
    spec.check_mu(&mu0)?;
    check_damping(opts.damping)?;
    let mut mu = mu0;
    let mut q = spec.zero_q();
    let mut control = DampingControl::new(opts.damping);
    let mut history = Vec::new();
    for it in 0..opts.max_iters {
        q = bellman_solve_from(&mu, spec, q, &opts.bellman)?;
        let (rt, rp) = stationary_residuals(&q, &mu, spec);
        let r = rt.max(rp);
        history.push(r);
        if r < opts.tol {
            return Ok(FixedPoint {
                q,
                mu,
                residual_t: rt,
                residual_p: rp,
                iterations: it,
                history,
            });
        }
        control.observe(r);
        let target = mu_fixed_point_from(&q, spec, mu.clone(), &opts.inner)?;
        let lambda = control.lambda;
        let next = mu
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(c, t)| (1.0 - lambda) * c + lambda * t)
            .collect();
        mu = ProbabilityVector::normalized(next)?;
    }
    Err(Error::NoConvergence {
        what: "game fixed point",
        iterations: opts.max_iters,
        residual: *history.last().unwrap_or(&f64::INFINITY),
        history,
    })
}

/// Control-regime stationary point: Q is the outer (slow) variable. Each
/// outer step takes the equilibrium distribution of the current greedy
/// policy, then moves Q toward the Bellman solution at that distribution.
pub fn mfc_solve(spec: &ProblemSpec, opts: &NestedOptions, q0: QTable) -> Result<FixedPoint> {
    spec.check_q(&q0)?;
    check_damping(opts.damping)?;
    let mut q = q0;
    let mut mu = ProbabilityVector::uniform(spec.n_states());
    let mut control = DampingControl::new(opts.damping);
    let mut history = Vec::new();
    for it in 0..opts.max_iters {
        mu = mu_fixed_point_from(&q, spec, mu, &opts.inner)?;
        let (rt, rp) = stationary_residuals(&q, &mu, spec);
        let r = rt.max(rp);
        history.push(r);
        if r < opts.tol {
            return Ok(FixedPoint {
                q,
                mu,
                residual_t: rt,
                residual_p: rp,
                iterations: it,
                history,
            });
        }
        control.observe(r);
        let target = bellman_solve_from(&mu, spec, q.clone(), &opts.bellman)?;
        let eta = control.lambda;
        let next: Vec<f64> = q
            .values()
            .iter()
            .zip(target.values())
            .map(|(c, t)| (1.0 - eta) * c + eta * t)
            .collect();
        q = QTable::from_vec(spec.n_states(), spec.n_actions(), next)?;
    }
    Err(Error::NoConvergence {
        what: "control fixed point",
        iterations: opts.max_iters,
        residual: *history.last().unwrap_or(&f64::INFINITY),
        history,
    })
}

/// Value of a fixed policy against a frozen population, by a direct linear
/// solve of `(I - e^{-gamma h} P_alpha) V = h f_alpha`. Returns `V` and the
/// one-step lookahead `Q(x,a) = h f(x,a) + e^{-gamma h} sum p(x'|x,a) V(x')`.
pub fn policy_evaluation(
    policy: &Policy,
    mu: &ProbabilityVector,
    spec: &ProblemSpec,
) -> Result<(Vec<f64>, QTable)> {
    spec.check_mu(mu)?;
    let (ns, na) = (spec.n_states(), spec.n_actions());
    if policy.actions().len() != ns {
        return Err(Error::DimensionMismatch {
            expected: ns,
            found: policy.actions().len(),
        });
    }
    let discount = spec.discount();
    let costs = spec.cost_table(mu);
    let kernel = spec.kernel.snapshot(mu);
    let mut a = DMatrix::identity(ns, ns);
    let mut b = DVector::zeros(ns);
    for x in 0..ns {
        let i = x * na + policy.action_of(x);
        b[x] = spec.h * costs[i];
        for (y, p) in kernel[i * ns..(i + 1) * ns].iter().enumerate() {
            a[(x, y)] -= discount * p;
        }
    }
    let v = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidParameter("policy evaluation system is singular".into()))?;
    let v: Vec<f64> = v.iter().copied().collect();
    let q = QTable::from_fn(ns, na, |x, a| {
        let i = x * na + a;
        let cont: f64 = kernel[i * ns..(i + 1) * ns]
            .iter()
            .zip(&v)
            .map(|(p, w)| p * w)
            .sum();
        spec.h * costs[i] + discount * cont
    });
    Ok((v, q))
}

/// Distance between two fixed points: `(||Q1 - Q2||_inf, ||mu1 - mu2||_TV)`.
pub fn fixed_point_gap(a: &FixedPoint, b: &FixedPoint) -> Result<(f64, f64)> {
    Ok((a.q.sup_distance(&b.q)?, tv_distance(&a.mu, &b.mu)?))
}
