//! Contraction diagnostics: mixing and Lipschitz constants, the Lyapunov
//! function `W min_F ||Q - Q*||_inf + ||mu - mu~(Q)||_TV`, the rate box and
//! decay constants of the convergence bound, and per-step monitors for the
//! two one-step inequalities it is built from.
//!
//! Sampled constants are lower bounds. A certificate computed from them is
//! optimistic; only constants marked [`Provenance::Exact`] or
//! [`Provenance::Declared`] by the caller give a sound bound.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    greedy_policy, induced_transition, tv_distance, LearningRates, ProbabilityVector, ProblemSpec,
    QTable,
};
use crate::oracles::{mu_fixed_point_from, DampedOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Derived analytically for the instance.
    Exact,
    /// Sampled maximum; the true constant may be larger.
    LowerBound,
    /// Supplied by the user as a valid upper bound.
    Declared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceFlags {
    pub beta: Provenance,
    pub l_p: Provenance,
    pub l_q: Provenance,
    pub l_f: Provenance,
    pub f_sup: Provenance,
}

/// Constants of the mixing and Lipschitz assumptions.
///
/// `l_p` and `l_q` bound the l1 distance between transition rows by
/// `l_p ||mu1 - mu2||_TV + l_q ||Q1 - Q2||_inf`; `l_f` is the Lipschitz
/// constant of the cost in `mu` (TV metric); `beta` is the minorization
/// constant `P(x, .) >= beta nu(.)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub beta: f64,
    pub l_p: f64,
    pub l_q: f64,
    pub l_f: f64,
    pub f_sup: f64,
    pub provenance: ProvenanceFlags,
}

impl AssumptionConstants {
    pub fn exact(beta: f64, l_p: f64, l_q: f64, l_f: f64, f_sup: f64) -> Self {
        Self {
            beta,
            l_p,
            l_q,
            l_f,
            f_sup,
            provenance: ProvenanceFlags {
                beta: Provenance::Exact,
                l_p: Provenance::Exact,
                l_q: Provenance::Exact,
                l_f: Provenance::Exact,
                f_sup: Provenance::Exact,
            },
        }
    }

    /// `2 beta - 1 - L_p`; the regime requires it to be positive.
    pub fn margin(&self) -> f64 {
        2.0 * self.beta - 1.0 - self.l_p
    }

    /// True when every constant is exact or declared, so bounds built from
    /// them are certificates rather than estimates.
    pub fn is_sound(&self) -> bool {
        let p = &self.provenance;
        [p.beta, p.l_p, p.l_q, p.l_f, p.f_sup]
            .iter()
            .all(|v| *v != Provenance::LowerBound)
    }

    fn require_regime(&self) -> Result<f64> {
        let m = self.margin();
        if !(self.beta > 0.0) || !(m > 0.0) {
            return Err(Error::AssumptionViolated(format!(
                "need 2 beta - 1 - L_p > 0, got beta = {}, L_p = {}",
                self.beta, self.l_p
            )));
        }
        Ok(m)
    }

    /// `L_f + L_p ||f||_inf / (e^{gamma h} - 1)`: sensitivity of the Bellman
    /// map to the population.
    fn coupling(&self, gamma: f64, h: f64) -> f64 {
        self.l_f + self.l_p * self.f_sup / (gamma * h).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub lambda_mu: f64,
    pub c1: f64,
    pub c2: f64,
    pub c: f64,
    /// Exclusive upper limits `(rho_mu, rho_q)` of the admissible rates.
    pub rate_box: (f64, f64),
    pub rates_admissible: bool,
    /// Asymptotic floor of the Lyapunov bound; infinite when `c` is invalid.
    pub floor: f64,
    pub weight: f64,
    /// `c` lies in (0, 1).
    pub valid: bool,
}

impl TheoremConstants {
    /// `(1 - c)^k L_0 + floor`.
    pub fn envelope(&self, k: usize, l0: f64) -> f64 {
        (1.0 - self.c).powi(k.min(i32::MAX as usize) as i32) * l0 + self.floor
    }
}

pub fn theorem_constants(
    ac: &AssumptionConstants,
    rates: LearningRates,
    gamma: f64,
    h: f64,
    weight: f64,
) -> Result<TheoremConstants> {
    let margin = ac.require_regime()?;
    if !(weight > 0.0) {
        return Err(Error::InvalidParameter("Lyapunov weight must be positive".into()));
    }
    let gap = -(-gamma * h).exp_m1(); // 1 - e^{-gamma h}
    let k = ac.coupling(gamma, h);
    let lambda_mu = 1.0 - rates.rho_mu * margin;
    let c1 = rates.rho_q * (gap - k * h * ac.l_q / margin)
        - 2.0 * lambda_mu * ac.l_q / (weight * margin);
    let c2 = 1.0 - lambda_mu - weight * rates.rho_q * h * k;
    let c = c1.min(c2);
    let valid = c > 0.0 && c < 1.0;
    let rate_box = (1.0 / margin, 1.0 / gap);
    let rates_admissible = rates.rho_mu > 0.0
        && rates.rho_mu < rate_box.0
        && rates.rho_q > 0.0
        && rates.rho_q < rate_box.1;
    let floor = if !valid {
        f64::INFINITY
    } else {
        2.0 * h * lambda_mu * ac.l_q * rates.rho_q * ac.f_sup / (c * gap * margin)
    };
    Ok(TheoremConstants {
        lambda_mu,
        c1,
        c2,
        c,
        rate_box,
        rates_admissible,
        floor,
        weight,
        valid,
    })
}

/// Bounds on the Lyapunov weight: `c1 > 0` needs `W > lower`, `c2 > 0`
/// needs `W < upper`.
pub fn weight_bounds(
    ac: &AssumptionConstants,
    rates: LearningRates,
    gamma: f64,
    h: f64,
) -> Result<(f64, f64)> {
    let margin = ac.require_regime()?;
    let gap = -(-gamma * h).exp_m1();
    let k = ac.coupling(gamma, h);
    let lambda_mu = 1.0 - rates.rho_mu * margin;
    let upper = if k > 0.0 {
        rates.rho_mu * margin / (rates.rho_q * h * k)
    } else {
        f64::INFINITY
    };
    let denom = rates.rho_q * margin * (gap - k * h * ac.l_q / margin);
    let lower = if ac.l_q == 0.0 {
        0.0
    } else if denom > 0.0 {
        2.0 * lambda_mu * ac.l_q / denom
    } else {
        f64::INFINITY
    };
    Ok((lower, upper))
}

/// A weight inside the admissible interval: the geometric mean of its ends
/// (half the upper end when the lower end is zero).
pub fn suggest_weight(
    ac: &AssumptionConstants,
    rates: LearningRates,
    gamma: f64,
    h: f64,
) -> Result<f64> {
    let (lower, upper) = weight_bounds(ac, rates, gamma, h)?;
    if !(lower < upper) {
        return Err(Error::EmptyWeightInterval { lower, upper });
    }
    Ok(match (lower == 0.0, upper.is_finite()) {
        (true, true) => 0.5 * upper,
        (true, false) => 1.0,
        (false, true) => (lower * upper).sqrt(),
        (false, false) => 2.0 * lower,
    })
}

/// Largest minorization constant of a row-stochastic matrix:
/// `beta = sum_x' min_x M(x, x')`, `nu = column minima / beta`.
pub fn estimate_beta(m: &DMatrix<f64>) -> Result<(f64, ProbabilityVector)> {
    let minima: Vec<f64> = (0..m.ncols())
        .map(|j| m.column(j).iter().copied().fold(f64::INFINITY, f64::min).max(0.0))
        .collect();
    let beta: f64 = minima.iter().sum();
    if !(beta > 0.0) {
        return Err(Error::NoMinorization);
    }
    let nu = ProbabilityVector::normalized(minima)?;
    Ok((beta.min(1.0), nu))
}

/// Smallest minorization constant over the induced chains of several Q
/// tables, each evaluated at its own equilibrium distribution.
pub fn estimate_beta_over(
    spec: &ProblemSpec,
    q_samples: &[QTable],
    inner: &DampedOptions,
) -> Result<f64> {
    let mut beta = f64::INFINITY;
    for q in q_samples {
        let mu = mu_fixed_point_from(q, spec, ProbabilityVector::uniform(spec.n_states()), inner)?;
        let (b, _) = estimate_beta(&induced_transition(q, &mu, spec))?;
        beta = beta.min(b);
    }
    Ok(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub l_p: f64,
    pub l_q: f64,
    pub pairs_p: usize,
    pub pairs_q: usize,
    /// Some Q pair with different greedy policies changed the chain, so the
    /// ratio is not bounded as the pair gets closer.
    pub greedy_discontinuity: bool,
    /// `l_q` hit [`LIPSCHITZ_CAP`].
    pub capped: bool,
}

pub const LIPSCHITZ_CAP: f64 = 1e6;

fn row_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Sampled lower bounds for the transition Lipschitz constants. `l_p` holds
/// Q fixed and maximises over all `(x, a)` rows and `mu` pairs; `l_q` holds
/// `mu` fixed and maximises over Q pairs.
pub fn estimate_lipschitz(
    spec: &ProblemSpec,
    q_samples: &[QTable],
    mu_samples: &[ProbabilityVector],
) -> Result<LipschitzEstimate> {
    if mu_samples.is_empty() {
        return Err(Error::InvalidParameter("no distribution samples".into()));
    }
    let (ns, na) = (spec.n_states(), spec.n_actions());
    let mut l_p: f64 = 0.0;
    let mut pairs_p = 0;
    if spec.kernel.depends_on_mu() {
        let snaps: Vec<Vec<f64>> = mu_samples
            .iter()
            .map(|m| spec.kernel.snapshot(m).into_owned())
            .collect();
        for i in 0..mu_samples.len() {
            for j in i + 1..mu_samples.len() {
                let d = tv_distance(&mu_samples[i], &mu_samples[j])?;
                if d <= 1e-12 {
                    continue;
                }
                pairs_p += 1;
                for r in 0..ns * na {
                    let diff = row_l1(&snaps[i][r * ns..(r + 1) * ns], &snaps[j][r * ns..(r + 1) * ns]);
                    l_p = l_p.max(diff / d);
                }
            }
        }
    }

    let mut l_q: f64 = 0.0;
    let mut pairs_q = 0;
    let mut discontinuity = false;
    for mu in mu_samples {
        let mats: Vec<DMatrix<f64>> = q_samples.iter().map(|q| induced_transition(q, mu, spec)).collect();
        let policies: Vec<_> = q_samples.iter().map(greedy_policy).collect();
        for i in 0..q_samples.len() {
            for j in i + 1..q_samples.len() {
                let d = q_samples[i].sup_distance(&q_samples[j])?;
                if d <= 0.0 {
                    continue;
                }
                pairs_q += 1;
                let diff = (0..ns)
                    .map(|x| {
                        (0..ns)
                            .map(|y| (mats[i][(x, y)] - mats[j][(x, y)]).abs())
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max);
                if diff > 0.0 && policies[i] != policies[j] {
                    discontinuity = true;
                }
                l_q = l_q.max(diff / d);
            }
        }
    }
    let capped = l_q >= LIPSCHITZ_CAP;
    if discontinuity {
        log::warn!("greedy policy switches change the chain: Lipschitz continuity in Q likely fails");
    }
    Ok(LipschitzEstimate {
        l_p,
        l_q: l_q.min(LIPSCHITZ_CAP),
        pairs_p,
        pairs_q,
        greedy_discontinuity: discontinuity,
        capped,
    })
}

/// Sampled lower bound of the cost's Lipschitz constant in `mu` (TV metric).
pub fn estimate_lf(spec: &ProblemSpec, mu_samples: &[ProbabilityVector]) -> Result<f64> {
    if !spec.cost.depends_on_mu() {
        return Ok(0.0);
    }
    let tables: Vec<Vec<f64>> = mu_samples.iter().map(|m| spec.cost_table(m)).collect();
    let mut best: f64 = 0.0;
    for i in 0..mu_samples.len() {
        for j in i + 1..mu_samples.len() {
            let d = tv_distance(&mu_samples[i], &mu_samples[j])?;
            if d <= 1e-12 {
                continue;
            }
            let diff = tables[i]
                .iter()
                .zip(&tables[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            best = best.max(diff / d);
        }
    }
    Ok(best)
}

/// `max |f|` over the grid and the supplied distributions.
pub fn f_sup(spec: &ProblemSpec, mu_samples: &[ProbabilityVector]) -> f64 {
    mu_samples
        .iter()
        .flat_map(|m| spec.cost_table(m))
        .fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Point masses, the uniform distribution and `n_random` Dirichlet(1) draws.
pub fn probe_distributions(n_states: usize, n_random: usize, seed: u64) -> Vec<ProbabilityVector> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<ProbabilityVector> = (0..n_states)
        .map(|i| ProbabilityVector::point_mass(n_states, i))
        .collect();
    out.push(ProbabilityVector::uniform(n_states));
    for _ in 0..n_random {
        let w: Vec<f64> = (0..n_states)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        out.push(ProbabilityVector::normalized(w).expect("positive exponential draws"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovValue {
    pub value: f64,
    /// `min_F ||Q - Q*||_inf`.
    pub q_gap: f64,
    /// `||mu - mu~(Q)||_TV`.
    pub mu_gap: f64,
    /// Index of the closest fixed point.
    pub nearest: usize,
}

/// Evaluates the Lyapunov function at `(q, mu)` against the finite set
/// `fixed_points`, which stands in for the full fixed-point set.
pub fn lyapunov(
    q: &QTable,
    mu: &ProbabilityVector,
    fixed_points: &[QTable],
    spec: &ProblemSpec,
    weight: f64,
    inner: &DampedOptions,
) -> Result<LyapunovValue> {
    if fixed_points.is_empty() {
        return Err(Error::InvalidParameter("empty fixed-point set".into()));
    }
    let mut q_gap = f64::INFINITY;
    let mut nearest = 0;
    for (i, fp) in fixed_points.iter().enumerate() {
        let d = q.sup_distance(fp)?;
        if d < q_gap {
            q_gap = d;
            nearest = i;
        }
    }
    let tilde = mu_fixed_point_from(q, spec, mu.clone(), inner)?;
    let mu_gap = tv_distance(mu, &tilde)?;
    Ok(LyapunovValue {
        value: weight * q_gap + mu_gap,
        q_gap,
        mu_gap,
        nearest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorStep {
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / previous gap`, when the previous gap is nonzero.
    pub ratio: Option<f64>,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub steps: Vec<MonitorStep>,
    pub violations: usize,
    pub slack: f64,
}

pub const MU_MONITOR_SLACK: f64 = 1e-12;
pub const Q_MONITOR_SLACK: f64 = 1e-10;

/// Checks `||mu_{k+1} - mu~||_TV <= Lambda_mu ||mu_k - mu~||_TV` along a
/// trajectory run with Q frozen. `mus` must hold consecutive iterates.
pub fn monitor_prop_mu(
    mus: &[ProbabilityVector],
    mu_tilde: &ProbabilityVector,
    ac: &AssumptionConstants,
    rates: LearningRates,
) -> Result<MonitorReport> {
    if !(ac.beta > 0.0) {
        return Err(Error::NoMinorization);
    }
    let margin = ac.require_regime()?;
    let lambda = 1.0 - rates.rho_mu * margin;
    let mut steps = Vec::new();
    let mut violations = 0;
    let mut prev = match mus.first() {
        Some(m) => tv_distance(m, mu_tilde)?,
        None => return Ok(MonitorReport { steps, violations, slack: MU_MONITOR_SLACK }),
    };
    for (k, m) in mus.iter().enumerate().skip(1) {
        let gap = tv_distance(m, mu_tilde)?;
        let rhs = lambda * prev;
        let violated = gap > rhs + MU_MONITOR_SLACK;
        violations += usize::from(violated);
        steps.push(MonitorStep {
            k,
            lhs: gap,
            rhs,
            ratio: (prev > 0.0).then(|| gap / prev),
            violated,
        });
        prev = gap;
    }
    Ok(MonitorReport {
        steps,
        violations,
        slack: MU_MONITOR_SLACK,
    })
}

/// Checks
/// `||Q_{k+1} - Q*|| <= (1 - rho_q (1 - e^{-gamma h})) ||Q_k - Q*||
///                      + rho_q h ||mu_k - mu*||_TV (L_f + L_p ||f|| / (e^{gamma h} - 1))`
/// along consecutive iterates `(qs[k], mus[k])`.
#[allow(clippy::too_many_arguments)]
pub fn monitor_prop_q(
    qs: &[QTable],
    mus: &[ProbabilityVector],
    q_star: &QTable,
    mu_star: &ProbabilityVector,
    ac: &AssumptionConstants,
    rates: LearningRates,
    gamma: f64,
    h: f64,
) -> Result<MonitorReport> {
    if qs.len() != mus.len() {
        return Err(Error::DimensionMismatch {
            expected: qs.len(),
            found: mus.len(),
        });
    }
    let gap = -(-gamma * h).exp_m1();
    let decay = 1.0 - rates.rho_q * gap;
    let k_coupling = ac.coupling(gamma, h);
    let mut steps = Vec::new();
    let mut violations = 0;
    for k in 0..qs.len().saturating_sub(1) {
        let prev = qs[k].sup_distance(q_star)?;
        let lhs = qs[k + 1].sup_distance(q_star)?;
        let rhs = decay * prev + rates.rho_q * h * tv_distance(&mus[k], mu_star)? * k_coupling;
        let violated = lhs > rhs + Q_MONITOR_SLACK;
        violations += usize::from(violated);
        steps.push(MonitorStep {
            k: k + 1,
            lhs,
            rhs,
            ratio: (prev > 0.0).then(|| lhs / prev),
            violated,
        });
    }
    Ok(MonitorReport {
        steps,
        violations,
        slack: Q_MONITOR_SLACK,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uniqueness {
    pub factor: f64,
    /// `factor < 1`, a sufficient condition for a unique fixed point.
    pub unique: bool,
}

/// `L_Q / (2 beta - 1 - L_p) * (h L_f + e^{-gamma h} L_p ||Q||) / (1 - e^{-gamma h})`
/// with `||Q||` defaulting to `h ||f|| / (1 - e^{-gamma h})`.
pub fn uniqueness_check(
    ac: &AssumptionConstants,
    gamma: f64,
    h: f64,
    q_sup: Option<f64>,
) -> Result<Uniqueness> {
    let margin = ac.require_regime()?;
    let gap = -(-gamma * h).exp_m1();
    let q_sup = q_sup.unwrap_or(h * ac.f_sup / gap);
    let factor = if ac.l_q == 0.0 {
        0.0
    } else {
        ac.l_q / margin * (h * ac.l_f + (-gamma * h).exp() * ac.l_p * q_sup) / gap
    };
    Ok(Uniqueness {
        factor,
        unique: factor < 1.0,
    })
}

/// One row of the Lyapunov envelope check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub k: usize,
    pub value: f64,
    pub q_gap: f64,
    pub mu_gap: f64,
    pub bound: f64,
    /// `bound - value`; negative means the bound is violated.
    pub slack: f64,
}

/// Compares recorded Lyapunov values with `(1 - c)^k L_0 + floor`. The
/// first entry must be iterate 0.
pub fn envelope_report(values: &[(usize, LyapunovValue)], tc: &TheoremConstants) -> Vec<EnvelopeRow> {
    let l0 = values.first().map(|(_, v)| v.value).unwrap_or(0.0);
    values
        .iter()
        .map(|(k, v)| {
            let bound = tc.envelope(*k, l0);
            EnvelopeRow {
                k: *k,
                value: v.value,
                q_gap: v.q_gap,
                mu_gap: v.mu_gap,
                bound,
                slack: bound - v.value,
            }
        })
        .collect()
}
