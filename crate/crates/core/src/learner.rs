//! Sample-based tabular two-timescale Q-learning.
//!
//! Each episode starts from a state drawn from the last per-step
//! distribution of the previous episode and runs `T` inner steps. Step `n`:
//!
//! 1. `mu_n <- mu_n + rho_mu (delta(X_n) - mu_n)`;
//! 2. pick `A_n` epsilon-greedily from `Q(X_n, .)`;
//! 3. observe `f(X_n, A_n, mu_n)` with the freshly updated `mu_n`;
//! 4. draw `X_{n+1}` from `p(. | X_n, A_n, mu)` where `mu` is the updated
//!    `mu_n` ([`EnvMu::Current`]) or its value before step 1
//!    ([`EnvMu::Previous`]);
//! 5. `Q(X_n, A_n) += rho_q (h f + e^{-gamma h} min_a Q(X_{n+1}, a) - Q(X_n, A_n))`.
//!
//! After the last inner step `mu_T` is updated with `X_T`, so the terminal
//! distribution that seeds the next episode tracks the visited states.
//!
//! Random draws come from a seeded ChaCha8 stream in a fixed order: one
//! uniform for the initial state, then per inner step one uniform for the
//! exploration branch, one integer draw only when exploring, and one uniform
//! for the next state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::LyapunovValue;
use crate::engine::{RunRecord, RunStep};
use crate::error::{Error, Result};
use crate::model::{
    argmin, op_p, op_t, tv_norm, LearningRates, ProbabilityVector, ProblemSpec, QTable,
};

/// Distribution handed to the transition kernel during an inner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnvMu {
    /// The per-step distribution after this step's update.
    #[default]
    Current,
    /// The per-step distribution before this step's update.
    Previous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub epsilon: f64,
    pub rates: LearningRates,
    pub seed: u64,
    pub env_mu: EnvMu,
    pub record_every: usize,
    /// Assert after every inner step that only the visited Q entry moved and
    /// that every per-step distribution is on the simplex. Slow.
    pub check_invariants: bool,
    pub keep_q: bool,
}

impl EpisodeConfig {
    pub fn new(rates: LearningRates, episodes: usize, steps_per_episode: usize, seed: u64) -> Self {
        Self {
            episodes,
            steps_per_episode,
            epsilon: 0.1,
            rates,
            seed,
            env_mu: EnvMu::Current,
            record_every: 1,
            check_invariants: false,
            keep_q: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.episodes == 0 || self.steps_per_episode == 0 || self.record_every == 0 {
            return Err(Error::InvalidParameter(
                "episodes, steps_per_episode and record_every must be at least 1".into(),
            ));
        }
        if !(self.rates.rho_mu >= 0.0 && self.rates.rho_q >= 0.0) {
            return Err(Error::InvalidParameter("learning rates must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub q: QTable,
    /// `mu_0, ..., mu_T`.
    pub mu_per_step: Vec<ProbabilityVector>,
    /// Completed episodes.
    pub episode: usize,
    pub rng: ChaCha8Rng,
}

impl LearnerState {
    /// The distribution that seeds the next episode.
    pub fn terminal_mu(&self) -> &ProbabilityVector {
        self.mu_per_step.last().expect("at least one per-step distribution")
    }
}

pub fn init_learner(spec: &ProblemSpec, cfg: &EpisodeConfig) -> LearnerState {
    let n = spec.n_states();
    LearnerState {
        q: spec.zero_q(),
        mu_per_step: vec![ProbabilityVector::uniform(n); cfg.steps_per_episode + 1],
        episode: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    }
}

/// Greedy action with probability `1 - epsilon`, uniform action otherwise.
/// Draws one uniform for the branch and, when exploring, one action index.
pub fn epsilon_greedy<R: Rng + ?Sized>(q_row: &[f64], epsilon: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    if u < epsilon {
        rng.random_range(0..q_row.len())
    } else {
        argmin(q_row)
    }
}

/// Inverse-CDF draw from a probability row with one uniform.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    // Rounding left the cumulative sum slightly below one.
    last_positive
}

/// `mu <- mu + rho (delta(x) - mu)`, exact on the simplex for `rho <= 1`.
fn indicator_update(mu: &ProbabilityVector, x: usize, rho: f64) -> ProbabilityVector {
    let mut w = mu.as_slice().to_vec();
    for (i, v) in w.iter_mut().enumerate() {
        let target = if i == x { 1.0 } else { 0.0 };
        *v += rho * (target - *v);
    }
    match ProbabilityVector::clamped(w) {
        Ok((p, clamped)) => {
            if clamped {
                log::warn!("rho_mu = {rho} pushed a per-step distribution off the simplex");
            }
            p
        }
        Err(_) => mu.clone(),
    }
}

/// One environment transition: epsilon-greedy action at `x`, then a
/// next-state draw from the kernel at `mu_env`.
pub fn transition<R: Rng + ?Sized>(
    q: &QTable,
    x: usize,
    mu_env: &ProbabilityVector,
    spec: &ProblemSpec,
    epsilon: f64,
    row: &mut [f64],
    rng: &mut R,
) -> (usize, usize) {
    let a = epsilon_greedy(q.row(x), epsilon, rng);
    spec.kernel.row_into(x, a, mu_env, row);
    (a, sample_index(row, rng))
}

fn check_simplex(mu: &ProbabilityVector) {
    let s: f64 = mu.as_slice().iter().sum();
    assert!(
        mu.as_slice().iter().all(|v| *v >= 0.0) && (s - 1.0).abs() < 1e-12,
        "per-step distribution left the simplex"
    );
}

/// Runs one full episode in place.
pub fn run_episode(state: &mut LearnerState, spec: &ProblemSpec, cfg: &EpisodeConfig) -> Result<()> {
    spec.check_q(&state.q)?;
    if state.mu_per_step.len() != cfg.steps_per_episode + 1 {
        return Err(Error::DimensionMismatch {
            expected: cfg.steps_per_episode + 1,
            found: state.mu_per_step.len(),
        });
    }
    let discount = spec.discount();
    let rates = cfg.rates;
    let mut row = vec![0.0; spec.n_states()];
    let start = state.mu_per_step.last().expect("at least one per-step distribution");
    let mut x = sample_index(start.as_slice(), &mut state.rng);
    for n in 0..cfg.steps_per_episode {
        let previous = state.mu_per_step[n].clone();
        state.mu_per_step[n] = indicator_update(&previous, x, rates.rho_mu);
        let mu_n = &state.mu_per_step[n];
        let mu_env = match cfg.env_mu {
            EnvMu::Current => mu_n,
            EnvMu::Previous => &previous,
        };
        let a = epsilon_greedy(state.q.row(x), cfg.epsilon, &mut state.rng);
        let cost = spec.cost.eval(x, a, mu_n);
        spec.kernel.row_into(x, a, mu_env, &mut row);
        let next = sample_index(&row, &mut state.rng);

        let before = cfg.check_invariants.then(|| state.q.clone());
        let target = spec.h * cost
            + discount * state.q.row(next).iter().copied().fold(f64::INFINITY, f64::min);
        let old = state.q.get(x, a);
        state.q.set(x, a, old + rates.rho_q * (target - old));
        if let Some(before) = before {
            for (i, (b, c)) in before.values().iter().zip(state.q.values()).enumerate() {
                assert!(
                    i == x * spec.n_actions() + a || b.to_bits() == c.to_bits(),
                    "an unvisited Q entry changed"
                );
            }
            check_simplex(&state.mu_per_step[n]);
        }
        if !state.q.get(x, a).is_finite() {
            return Err(Error::NonFinite {
                iteration: state.episode,
                what: "Q table",
            });
        }
        x = next;
    }
    let t = cfg.steps_per_episode;
    state.mu_per_step[t] = indicator_update(&state.mu_per_step[t], x, rates.rho_mu);
    if cfg.check_invariants {
        check_simplex(&state.mu_per_step[t]);
    }
    state.episode += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub q: QTable,
    pub mu_per_step: Vec<ProbabilityVector>,
    /// One step per recorded episode, with `k` the number of completed
    /// episodes and `mu` the terminal per-step distribution. Residuals are
    /// those of the exact operators at `(Q, mu_T)`.
    pub record: RunRecord,
    pub state: LearnerState,
}

pub type EpisodeObserver<'a> =
    dyn FnMut(&LearnerState) -> Result<Option<LyapunovValue>> + 'a;

pub fn train(spec: &ProblemSpec, cfg: &EpisodeConfig) -> Result<TrainOutput> {
    train_observed(spec, cfg, init_learner(spec, cfg), &mut |_| Ok(None))
}

/// Continues training from `state` until `cfg.episodes` episodes are
/// complete, recording every `record_every` episodes and at the end.
pub fn train_observed(
    spec: &ProblemSpec,
    cfg: &EpisodeConfig,
    mut state: LearnerState,
    observer: &mut EpisodeObserver<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut steps = Vec::new();
    let mut record = |state: &LearnerState, steps: &mut Vec<RunStep>| -> Result<()> {
        let mu = state.terminal_mu().clone();
        let lyapunov = observer(state)?;
        steps.push(RunStep {
            k: state.episode,
            res_t_sup: op_t(&state.q, &mu, spec).sup_norm(),
            res_p_tv: tv_norm(&op_p(&state.q, &mu, spec)),
            mu,
            q: cfg.keep_q.then(|| state.q.clone()),
            lyapunov,
        });
        Ok(())
    };
    record(&state, &mut steps)?;
    while state.episode < cfg.episodes {
        run_episode(&mut state, spec, cfg)?;
        if state.episode.is_multiple_of(cfg.record_every) || state.episode == cfg.episodes {
            record(&state, &mut steps)?;
        }
    }
    Ok(TrainOutput {
        q: state.q.clone(),
        mu_per_step: state.mu_per_step.clone(),
        record: RunRecord {
            steps,
            final_q: state.q.clone(),
            final_mu: state.terminal_mu().clone(),
            iterations: state.episode,
            converged: false,
        },
        state,
    })
}
