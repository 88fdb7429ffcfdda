//! Exact-operator two-timescale iteration
//!
//! ```text
//! mu_{k+1} = mu_k + rho_mu * P(Q_k, mu_k)
//! Q_{k+1}  = Q_k  + rho_q  * T(Q_k, mu_k)
//! ```
//!
//! Both operators are evaluated at the same `(Q_k, mu_k)` snapshot. The scalar
//! toy system at the bottom of the file has two stable fixed points, and the
//! rate ratio decides which one the iteration picks.

use serde::{Deserialize, Serialize};

use crate::diagnostics::LyapunovValue;
use crate::error::{Error, Result};
use crate::model::{
    bellman_image_with, greedy_policy, policy_transition, push_forward, tv_norm, LearningRates,
    ProbabilityVector, ProblemSpec, QTable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub rates: LearningRates,
    pub max_iters: usize,
    /// Sup-norm tolerance on `T(Q, mu)`.
    pub tol_t: f64,
    /// Total-variation tolerance on `P(Q, mu)`.
    pub tol_p: f64,
    pub record_every: usize,
    /// Stop early once both residuals are below tolerance. Off by default:
    /// the iteration count is the stopping rule.
    pub stop_on_tolerance: bool,
    /// Keep a Q snapshot in every recorded step.
    pub keep_q: bool,
}

impl IterationConfig {
    pub fn new(rates: LearningRates, max_iters: usize) -> Self {
        Self {
            rates,
            max_iters,
            tol_t: 1e-10,
            tol_p: 1e-10,
            record_every: 1,
            stop_on_tolerance: false,
            keep_q: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol_t > 0.0 && self.tol_p > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be at least 1".into()));
        }
        if !(self.rates.rho_mu >= 0.0 && self.rates.rho_q >= 0.0) {
            return Err(Error::InvalidParameter("learning rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One recorded iterate. Residuals are those of `(Q_k, mu_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStep {
    pub k: usize,
    pub mu: ProbabilityVector,
    pub q: Option<QTable>,
    pub res_t_sup: f64,
    /// `||P(Q_k, mu_k)||_TV`, i.e. half the l1 norm.
    pub res_p_tv: f64,
    pub lyapunov: Option<LyapunovValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<RunStep>,
    pub final_q: QTable,
    pub final_mu: ProbabilityVector,
    /// Number of updates applied.
    pub iterations: usize,
    /// Both residuals were below tolerance at the last evaluated iterate.
    pub converged: bool,
}

/// Both operators at one snapshot, sharing the cost table and kernel.
struct Evaluation {
    drift: Vec<f64>,
    residual: QTable,
}

fn evaluate(q: &QTable, mu: &ProbabilityVector, spec: &ProblemSpec) -> Evaluation {
    let m = policy_transition(&greedy_policy(q), mu, spec);
    let drift = push_forward(mu.as_slice(), &m)
        .into_iter()
        .zip(mu.as_slice())
        .map(|(n, c)| n - c)
        .collect();
    let costs = spec.cost_table(mu);
    let kernel = spec.kernel.snapshot(mu);
    let mut residual = bellman_image_with(q, &costs, &kernel, spec.h, spec.discount());
    for (r, v) in residual.values_mut().iter_mut().zip(q.values()) {
        *r -= v;
    }
    Evaluation { drift, residual }
}

fn apply(
    q: &QTable,
    mu: &ProbabilityVector,
    eval: &Evaluation,
    rates: LearningRates,
) -> (QTable, ProbabilityVector) {
    let mut next_q = q.clone();
    for (v, r) in next_q.values_mut().iter_mut().zip(eval.residual.values()) {
        *v += rates.rho_q * r;
    }
    let raw: Vec<f64> = mu
        .as_slice()
        .iter()
        .zip(&eval.drift)
        .map(|(m, d)| m + rates.rho_mu * d)
        .collect();
    let next_mu = match ProbabilityVector::clamped(raw) {
        Ok((p, clamped)) => {
            if clamped {
                log::warn!(
                    "distribution left the simplex (rho_mu = {}); clamped and renormalised",
                    rates.rho_mu
                );
            }
            p
        }
        // Only reachable with non-finite input; keep the old iterate so that
        // the caller's finiteness check reports it.
        Err(_) => mu.clone(),
    };
    (next_q, next_mu)
}

/// One simultaneous update of `(Q, mu)`.
pub fn step(
    q: &QTable,
    mu: &ProbabilityVector,
    spec: &ProblemSpec,
    rates: LearningRates,
) -> (QTable, ProbabilityVector) {
    let eval = evaluate(q, mu, spec);
    apply(q, mu, &eval, rates)
}

/// Called at every recorded iterate; may return a Lyapunov value to store.
pub type Observer<'a> = dyn FnMut(&QTable, &ProbabilityVector) -> Result<Option<LyapunovValue>> + 'a;

pub fn run(
    spec: &ProblemSpec,
    q0: QTable,
    mu0: ProbabilityVector,
    cfg: &IterationConfig,
) -> Result<RunRecord> {
    run_observed(spec, q0, mu0, cfg, &mut |_, _| Ok(None))
}

/// Iterates [`step`] for `cfg.max_iters` updates (or until both residuals
/// are below tolerance when `stop_on_tolerance` is set). Iterates
/// `0, record_every, 2 record_every, ...` and the final one are recorded.
pub fn run_observed(
    spec: &ProblemSpec,
    q0: QTable,
    mu0: ProbabilityVector,
    cfg: &IterationConfig,
    observer: &mut Observer<'_>,
) -> Result<RunRecord> {
    cfg.validate()?;
    spec.check_q(&q0)?;
    spec.check_mu(&mu0)?;
    let mut q = q0;
    let mut mu = mu0;
    let mut steps = Vec::new();
    let mut k = 0;
    loop {
        let eval = evaluate(&q, &mu, spec);
        let res_t = eval.residual.sup_norm();
        let res_p = tv_norm(&eval.drift);
        if !res_t.is_finite() || !q.is_finite() {
            return Err(Error::NonFinite {
                iteration: k,
                what: "Q table",
            });
        }
        if !res_p.is_finite() {
            return Err(Error::NonFinite {
                iteration: k,
                what: "distribution",
            });
        }
        let converged = res_t < cfg.tol_t && res_p < cfg.tol_p;
        let last = k == cfg.max_iters || (cfg.stop_on_tolerance && converged);
        if k % cfg.record_every == 0 || last {
            if cfg.rates.rho_mu <= 1.0 {
                debug_assert!(mu.as_slice().iter().all(|v| *v >= 0.0));
            }
            let lyapunov = observer(&q, &mu)?;
            steps.push(RunStep {
                k,
                mu: mu.clone(),
                q: cfg.keep_q.then(|| q.clone()),
                res_t_sup: res_t,
                res_p_tv: res_p,
                lyapunov,
            });
        }
        if last {
            return Ok(RunRecord {
                steps,
                final_q: q,
                final_mu: mu,
                iterations: k,
                converged,
            });
        }
        let (nq, nmu) = apply(&q, &mu, &eval, cfg.rates);
        q = nq;
        mu = nmu;
        k += 1;
    }
}

// ---------------------------------------------------------------------------
// Scalar toy system
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyState {
    pub q: f64,
    pub mu: f64,
}

impl ToyState {
    pub const fn new(q: f64, mu: f64) -> Self {
        Self { q, mu }
    }

    pub fn distance(&self, other: &ToyState) -> f64 {
        (self.q - other.q).abs().max((self.mu - other.mu).abs())
    }
}

/// Stable point reached when the distribution is the slow variable.
pub const TOY_MFG_POINT: ToyState = ToyState::new(1.0, 0.0);
/// Stable point reached when Q is the slow variable.
pub const TOY_MFC_POINT: ToyState = ToyState::new(0.5, 0.5);
/// Unstable third fixed point.
pub const TOY_SADDLE: ToyState = ToyState::new(1.0, 0.5);

pub fn toy_op_p(s: ToyState) -> f64 {
    (s.q - 1.0) * (s.mu - s.q)
}

pub fn toy_op_t(s: ToyState) -> f64 {
    -(s.mu - 0.5) * (s.mu - s.q + 1.0)
}

pub fn toy_step(s: ToyState, rates: LearningRates) -> ToyState {
    ToyState {
        q: s.q + rates.rho_q * toy_op_t(s),
        mu: s.mu + rates.rho_mu * toy_op_p(s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrajectory {
    /// Initial state followed by every iterate.
    pub states: Vec<ToyState>,
    pub converged: bool,
}

impl ToyTrajectory {
    pub fn last(&self) -> ToyState {
        *self.states.last().expect("trajectory holds the initial state")
    }
}

const TOY_DIVERGENCE: f64 = 1e6;

/// Iterates [`toy_step`] until the update is smaller than `tol` in the max
/// norm, or `max_iters` updates.
pub fn toy_run(
    s0: ToyState,
    rates: LearningRates,
    max_iters: usize,
    tol: f64,
) -> Result<ToyTrajectory> {
    let mut states = vec![s0];
    let mut s = s0;
    for k in 1..=max_iters {
        let next = toy_step(s, rates);
        if !(next.q.abs() <= TOY_DIVERGENCE && next.mu.abs() <= TOY_DIVERGENCE) {
            return Err(Error::Divergence {
                iteration: k,
                q: next.q,
                mu: next.mu,
            });
        }
        states.push(next);
        let moved = next.distance(&s);
        s = next;
        if moved < tol {
            return Ok(ToyTrajectory {
                states,
                converged: true,
            });
        }
    }
    Ok(ToyTrajectory {
        states,
        converged: false,
    })
}

/// `[[dP/dmu, dP/dQ], [dT/dmu, dT/dQ]]`.
pub fn toy_jacobian(s: ToyState) -> [[f64; 2]; 2] {
    [
        [s.q - 1.0, s.mu - 2.0 * s.q + 1.0],
        [-2.0 * s.mu + s.q - 0.5, s.mu - 0.5],
    ]
}

/// Spectral radius of the linearised update `I + diag(rho_mu, rho_q) J`.
pub fn toy_spectral_radius(s: ToyState, rates: LearningRates) -> f64 {
    let j = toy_jacobian(s);
    let a = 1.0 + rates.rho_mu * j[0][0];
    let b = rates.rho_mu * j[0][1];
    let c = rates.rho_q * j[1][0];
    let d = 1.0 + rates.rho_q * j[1][1];
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (tr / 2.0 + r).abs().max((tr / 2.0 - r).abs())
    } else {
        // Complex pair: |lambda|^2 = det.
        det.sqrt()
    }
}
