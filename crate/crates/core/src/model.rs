//! Domain types shared by every solver, and the two coupled operators of the
//! iteration: the distribution drift `op_p` and the Bellman residual `op_t`.
//!
//! Conventions used throughout the crate:
//!
//! * costs are minimised, so the greedy policy is a per-state argmin with ties
//!   going to the lowest action index;
//! * the total-variation distance between two probability vectors is half
//!   their l1 distance. For signed vectors of zero total mass this equals the
//!   supremum over subsets `sup_A |sum_{x in A} d(x)|`, and it is the
//!   convention under which `||d||_1 = 2 ||d||_TV`.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(weights) - 1` accepted by [`ProbabilityVector::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Ordered, strictly increasing set of real grid points (states or actions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Grid {
    labels: Vec<f64>,
}

impl Grid {
    pub fn new(labels: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidGrid("grid must have at least one point".into()));
        }
        if labels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("grid labels must be finite".into()));
        }
        if let Some(i) = labels.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "labels must be strictly increasing (index {} -> {})",
                i,
                i + 1
            )));
        }
        Ok(Self { labels })
    }

    /// Evenly spaced grid `min, min + step, ..., max`. The number of points is
    /// `round((max - min) / step) + 1`.
    pub fn from_range(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !min.is_finite() || !max.is_finite() || max < min {
            return Err(Error::InvalidGrid(format!(
                "bad range [{min}, {max}] with step {step}"
            )));
        }
        let n = ((max - min) / step).round() as usize + 1;
        Self::new((0..n).map(|i| min + i as f64 * step).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn min(&self) -> f64 {
        self.labels[0]
    }

    pub fn max(&self) -> f64 {
        self.labels[self.labels.len() - 1]
    }
}

impl TryFrom<Vec<f64>> for Grid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Grid::new(v)
    }
}

impl From<Grid> for Vec<f64> {
    fn from(g: Grid) -> Self {
        g.labels
    }
}

/// A distribution over the finite state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector {
    weights: Vec<f64>,
}

impl ProbabilityVector {
    /// Validates that `weights` already lies on the simplex (within
    /// [`SIMPLEX_TOL`]) and renormalises away the rounding error.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("empty weight vector".into()));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weight {} at index {i} is negative or non-finite",
                weights[i]
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(Self::from_nonnegative(weights, sum))
    }

    /// Normalises nonnegative weights with positive total mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidDistribution("total mass is zero".into()));
        }
        Ok(Self::from_nonnegative(weights, sum))
    }

    /// Clamps negative entries to zero and renormalises. Returns whether any
    /// clamping took place.
    pub fn clamped(mut weights: Vec<f64>) -> Result<(Self, bool)> {
        let mut clamped = false;
        for w in weights.iter_mut() {
            if !w.is_finite() {
                return Err(Error::InvalidDistribution("non-finite weight".into()));
            }
            if *w < 0.0 {
                *w = 0.0;
                clamped = true;
            }
        }
        Ok((Self::normalized(weights)?, clamped))
    }

    fn from_nonnegative(mut weights: Vec<f64>, sum: f64) -> Self {
        if sum != 1.0 {
            weights.iter_mut().for_each(|w| *w /= sum);
        }
        Self { weights }
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution on an empty space");
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        assert!(at < n, "point mass index out of range");
        let mut weights = vec![0.0; n];
        weights[at] = 1.0;
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }

    /// `sum_x label(x) mu(x)`.
    pub fn mean(&self, labels: &[f64]) -> f64 {
        self.weights.iter().zip(labels).map(|(w, x)| w * x).sum()
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbabilityVector::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.weights
    }
}

/// State-by-action table stored row-major. Used both for Q-functions and for
/// Bellman residual tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_vec(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                expected: n_states * n_actions,
                found: values.len(),
            });
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::InvalidParameter("ragged Q table rows".into()));
        }
        Self::from_vec(rows.len(), n_actions, rows.concat())
    }

    pub fn from_fn(n_states: usize, n_actions: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_states * n_actions);
        for x in 0..n_states {
            for a in 0..n_actions {
                values.push(f(x, a));
            }
        }
        Self {
            n_states,
            n_actions,
            values,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, x: usize, a: usize) -> f64 {
        self.values[x * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, x: usize, a: usize, v: f64) {
        self.values[x * self.n_actions + a] = v;
    }

    #[inline]
    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_actions.max(1))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `min_a q(x, a)` for every state.
    pub fn row_minima(&self) -> Vec<f64> {
        self.rows()
            .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    /// `||self - other||_inf`.
    pub fn sup_distance(&self, other: &QTable) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// `self + scale * other`, entrywise.
    pub fn add_scaled(&self, other: &QTable, scale: f64) -> Result<QTable> {
        self.check_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(QTable {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values,
        })
    }

    fn check_shape(&self, other: &QTable) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                found: other.values.len(),
            });
        }
        Ok(())
    }
}

/// Deterministic Markov policy: one action index per state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Policy {
    actions: Vec<usize>,
}

impl Policy {
    pub fn new(actions: Vec<usize>, n_actions: usize) -> Result<Self> {
        if let Some(&a) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::InvalidParameter(format!(
                "action index {a} out of range for {n_actions} actions"
            )));
        }
        Ok(Self { actions })
    }

    pub fn constant(n_states: usize, action: usize) -> Self {
        Self {
            actions: vec![action; n_states],
        }
    }

    pub fn action_of(&self, x: usize) -> usize {
        self.actions[x]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
}

/// Fixed learning rates of the slow/fast iterates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub rho_mu: f64,
    pub rho_q: f64,
}

impl LearningRates {
    pub fn new(rho_mu: f64, rho_q: f64) -> Result<Self> {
        if !(rho_mu > 0.0 && rho_mu.is_finite()) || !(rho_q > 0.0 && rho_q.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rates must be positive (rho_mu = {rho_mu}, rho_q = {rho_q})"
            )));
        }
        Ok(Self { rho_mu, rho_q })
    }

    /// Unchecked constructor that also admits zero rates, for frozen-iterate
    /// experiments.
    pub const fn frozen_ok(rho_mu: f64, rho_q: f64) -> Self {
        Self { rho_mu, rho_q }
    }

    /// `rho_q / rho_mu`.
    pub fn ratio(&self) -> f64 {
        self.rho_q / self.rho_mu
    }
}

/// `p(x' | x, a, mu)` on a finite space.
pub trait TransitionKernel: Send + Sync + fmt::Debug {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;

    /// Writes the next-state distribution for `(x, a, mu)` into `out`.
    fn row_into(&self, x: usize, a: usize, mu: &ProbabilityVector, out: &mut [f64]);

    fn depends_on_mu(&self) -> bool {
        true
    }

    /// All rows at `mu`, laid out as `[(x * n_actions + a) * n_states + x']`.
    fn snapshot(&self, mu: &ProbabilityVector) -> Cow<'_, [f64]> {
        let (ns, na) = (self.n_states(), self.n_actions());
        let mut out = vec![0.0; ns * na * ns];
        for (i, row) in out.chunks_mut(ns).enumerate() {
            self.row_into(i / na, i % na, mu, row);
        }
        Cow::Owned(out)
    }
}

/// Running cost `f(x, a, mu)`.
pub trait CostFunction: Send + Sync + fmt::Debug {
    fn eval(&self, x: usize, a: usize, mu: &ProbabilityVector) -> f64;

    fn depends_on_mu(&self) -> bool {
        true
    }

    /// Row-major `n_states x n_actions` table of costs at `mu`.
    fn table(&self, mu: &ProbabilityVector, n_states: usize, n_actions: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n_states * n_actions);
        for x in 0..n_states {
            for a in 0..n_actions {
                out.push(self.eval(x, a, mu));
            }
        }
        out
    }
}

/// Kernel backed by a closure. Handy for small hand-built instances.
pub struct FnKernel<F> {
    n_states: usize,
    n_actions: usize,
    depends_on_mu: bool,
    f: F,
}

impl<F> FnKernel<F>
where
    F: Fn(usize, usize, &ProbabilityVector, &mut [f64]) + Send + Sync,
{
    pub fn new(n_states: usize, n_actions: usize, depends_on_mu: bool, f: F) -> Self {
        Self {
            n_states,
            n_actions,
            depends_on_mu,
            f,
        }
    }
}

impl<F> fmt::Debug for FnKernel<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnKernel")
            .field("n_states", &self.n_states)
            .field("n_actions", &self.n_actions)
            .finish_non_exhaustive()
    }
}

impl<F> TransitionKernel for FnKernel<F>
where
    F: Fn(usize, usize, &ProbabilityVector, &mut [f64]) + Send + Sync,
{
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn row_into(&self, x: usize, a: usize, mu: &ProbabilityVector, out: &mut [f64]) {
        (self.f)(x, a, mu, out)
    }
    fn depends_on_mu(&self) -> bool {
        self.depends_on_mu
    }
}

/// Cost backed by a closure.
pub struct FnCost<F> {
    depends_on_mu: bool,
    f: F,
}

impl<F> FnCost<F>
where
    F: Fn(usize, usize, &ProbabilityVector) -> f64 + Send + Sync,
{
    pub fn new(depends_on_mu: bool, f: F) -> Self {
        Self { depends_on_mu, f }
    }
}

impl<F> fmt::Debug for FnCost<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnCost").finish_non_exhaustive()
    }
}

impl<F> CostFunction for FnCost<F>
where
    F: Fn(usize, usize, &ProbabilityVector) -> f64 + Send + Sync,
{
    fn eval(&self, x: usize, a: usize, mu: &ProbabilityVector) -> f64 {
        (self.f)(x, a, mu)
    }
    fn depends_on_mu(&self) -> bool {
        self.depends_on_mu
    }
}

/// A discrete-time mean-field problem: spaces, cost, kernel, discount rate
/// `gamma` and time step `h`. The per-step discount is `exp(-gamma h)`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub states: Grid,
    pub actions: Grid,
    pub cost: Arc<dyn CostFunction>,
    pub kernel: Arc<dyn TransitionKernel>,
    pub gamma: f64,
    pub h: f64,
}

impl ProblemSpec {
    pub fn new(
        states: Grid,
        actions: Grid,
        cost: Arc<dyn CostFunction>,
        kernel: Arc<dyn TransitionKernel>,
        gamma: f64,
        h: f64,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) || !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma and h must be positive (gamma = {gamma}, h = {h})"
            )));
        }
        if kernel.n_states() != states.len() {
            return Err(Error::DimensionMismatch {
                expected: states.len(),
                found: kernel.n_states(),
            });
        }
        if kernel.n_actions() != actions.len() {
            return Err(Error::DimensionMismatch {
                expected: actions.len(),
                found: kernel.n_actions(),
            });
        }
        Ok(Self {
            states,
            actions,
            cost,
            kernel,
            gamma,
            h,
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// `exp(-gamma h)`.
    pub fn discount(&self) -> f64 {
        (-self.gamma * self.h).exp()
    }

    pub fn cost_table(&self, mu: &ProbabilityVector) -> Vec<f64> {
        self.cost.table(mu, self.n_states(), self.n_actions())
    }

    /// `h ||f||_inf / (1 - exp(-gamma h))` for a given cost sup-norm.
    pub fn q_bound(&self, f_sup: f64) -> f64 {
        self.h * f_sup / (1.0 - self.discount())
    }

    pub fn zero_q(&self) -> QTable {
        QTable::zeros(self.n_states(), self.n_actions())
    }

    pub(crate) fn check_q(&self, q: &QTable) -> Result<()> {
        if q.n_states() != self.n_states() || q.n_actions() != self.n_actions() {
            return Err(Error::DimensionMismatch {
                expected: self.n_states() * self.n_actions(),
                found: q.n_states() * q.n_actions(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_mu(&self, mu: &ProbabilityVector) -> Result<()> {
        if mu.len() != self.n_states() {
            return Err(Error::DimensionMismatch {
                expected: self.n_states(),
                found: mu.len(),
            });
        }
        Ok(())
    }
}

/// Index of the smallest entry; ties go to the lowest index.
#[inline]
pub fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v < row[best] {
            best = i;
        }
    }
    best
}

/// Per-state argmin of the Q table.
pub fn greedy_policy(q: &QTable) -> Policy {
    Policy {
        actions: q.rows().map(argmin).collect(),
    }
}

/// Transition matrix of the population when every agent follows `policy`
/// and the kernel is evaluated at `mu`.
pub fn policy_transition(policy: &Policy, mu: &ProbabilityVector, spec: &ProblemSpec) -> DMatrix<f64> {
    let n = spec.n_states();
    let mut m = DMatrix::zeros(n, n);
    let mut row = vec![0.0; n];
    for x in 0..n {
        spec.kernel.row_into(x, policy.action_of(x), mu, &mut row);
        for (j, v) in row.iter().enumerate() {
            m[(x, j)] = *v;
        }
    }
    m
}

/// `P^{Q,mu}(x, x') = p(x' | x, argmin_a Q(x, a), mu)`.
pub fn induced_transition(q: &QTable, mu: &ProbabilityVector, spec: &ProblemSpec) -> DMatrix<f64> {
    policy_transition(&greedy_policy(q), mu, spec)
}

/// Row vector times matrix: `(mu M)(x') = sum_x mu(x) M(x, x')`.
pub fn push_forward(mu: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.ncols();
    let mut out = vec![0.0; n];
    for (x, w) in mu.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += w * m[(x, j)];
        }
    }
    out
}

/// Distribution drift `mu P^{Q,mu} - mu`. Entries sum to zero.
pub fn op_p(q: &QTable, mu: &ProbabilityVector, spec: &ProblemSpec) -> Vec<f64> {
    let m = induced_transition(q, mu, spec);
    push_forward(mu.as_slice(), &m)
        .into_iter()
        .zip(mu.as_slice())
        .map(|(next, cur)| next - cur)
        .collect()
}

/// Bellman residual
/// `h f(x,a,mu) + exp(-gamma h) sum_x' p(x'|x,a,mu) min_a' Q(x',a') - Q(x,a)`.
pub fn op_t(q: &QTable, mu: &ProbabilityVector, spec: &ProblemSpec) -> QTable {
    let mut out = bellman_image(q, mu, spec);
    for (o, v) in out.values_mut().iter_mut().zip(q.values()) {
        *o -= v;
    }
    out
}

/// The Bellman map `B_mu(Q)(x,a) = h f + exp(-gamma h) sum p min Q`.
pub fn bellman_image(q: &QTable, mu: &ProbabilityVector, spec: &ProblemSpec) -> QTable {
    let costs = spec.cost_table(mu);
    let kernel = spec.kernel.snapshot(mu);
    bellman_image_with(q, &costs, &kernel, spec.h, spec.discount())
}

/// Bellman map with a pre-evaluated cost table and kernel snapshot.
/// Dot product with four independent accumulators so the reduction
/// pipelines.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn bellman_image_with(
    q: &QTable,
    costs: &[f64],
    kernel: &[f64],
    h: f64,
    discount: f64,
) -> QTable {
    let ns = q.n_states();
    let na = q.n_actions();
    let minima = q.row_minima();
    let values = (0..ns * na)
        .map(|i| {
            let row = &kernel[i * ns..(i + 1) * ns];
            h * costs[i] + discount * dot(row, &minima)
        })
        .collect();
    QTable {
        n_states: ns,
        n_actions: na,
        values,
    }
}

/// Half the l1 distance between two probability vectors.
pub fn tv_distance(a: &ProbabilityVector, b: &ProbabilityVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(tv_norm(
        &a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x - y)
            .collect::<Vec<_>>(),
    ))
}

/// `||d||_TV = ||d||_1 / 2` for a signed vector of zero total mass.
pub fn tv_norm(d: &[f64]) -> f64 {
    0.5 * d.iter().map(|v| v.abs()).sum::<f64>()
}

pub fn sup_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flip_spec() -> ProblemSpec {
        // Action 0 stays, action 1 flips the state.
        let kernel = FnKernel::new(2, 2, false, |x, a, _mu, out: &mut [f64]| {
            out.fill(0.0);
            out[if a == 0 { x } else { 1 - x }] = 1.0;
        });
        let cost = FnCost::new(false, |_, _, _| 0.0);
        ProblemSpec::new(
            Grid::new(vec![0.0, 1.0]).unwrap(),
            Grid::new(vec![0.0, 1.0]).unwrap(),
            Arc::new(cost),
            Arc::new(kernel),
            1.0,
            0.1,
        )
        .unwrap()
    }

    fn random_spec(n: usize, m: usize, seed: u64) -> ProblemSpec {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n * m)
            .map(|_| {
                let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let costs: Vec<f64> = (0..n * m).map(|_| rng.random::<f64>()).collect();
        let kernel = FnKernel::new(n, m, false, move |x, a, _mu, out: &mut [f64]| {
            out.copy_from_slice(&rows[x * m + a]);
        });
        let cost = FnCost::new(false, move |x, a, _| costs[x * m + a]);
        ProblemSpec::new(
            Grid::from_range(0.0, (n - 1) as f64, 1.0).unwrap(),
            Grid::from_range(0.0, (m - 1) as f64, 1.0).unwrap(),
            Arc::new(cost),
            Arc::new(kernel),
            1.0,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn grid_rejects_unsorted_and_empty() {
        assert!(Grid::new(vec![]).is_err());
        assert!(Grid::new(vec![0.0, 0.0]).is_err());
        assert!(Grid::new(vec![1.0, 0.0]).is_err());
        assert_eq!(Grid::from_range(-2.0, 2.0, 0.1).unwrap().len(), 41);
        assert_eq!(Grid::from_range(-2.0, 2.0, 0.2).unwrap().len(), 21);
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        let p = ProbabilityVector::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.25, 0.75]);
        let (c, clamped) = ProbabilityVector::clamped(vec![-0.5, 1.0, 1.0]).unwrap();
        assert!(clamped);
        assert_eq!(c.as_slice(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let q = QTable::zeros(3, 3);
        assert_eq!(greedy_policy(&q).actions(), &[0, 0, 0]);
        let q = QTable::from_fn(3, 3, |_, a| a as f64);
        assert_eq!(greedy_policy(&q).actions(), &[0, 0, 0]);
        let q = QTable::from_rows(&[vec![2.0, 1.0, 1.0], vec![0.0, -1.0, 5.0]]).unwrap();
        assert_eq!(greedy_policy(&q).actions(), &[1, 1]);
    }

    #[test]
    fn induced_transition_stay_action_is_identity() {
        let spec = flip_spec();
        // Q prefers action 0 ("stay") in both states.
        let q = QTable::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let m = induced_transition(&q, &ProbabilityVector::uniform(2), &spec);
        assert_eq!(m, DMatrix::identity(2, 2));
        let q = QTable::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let m = induced_transition(&q, &ProbabilityVector::uniform(2), &spec);
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(1, 0)], 1.0);
    }

    #[test]
    fn mu_independent_kernel_ignores_q_and_mu() {
        let base = [[0.2, 0.8], [0.6, 0.4]];
        let kernel = FnKernel::new(2, 2, false, move |x, _a, _mu, out: &mut [f64]| {
            out.copy_from_slice(&base[x]);
        });
        let spec = ProblemSpec::new(
            Grid::new(vec![0.0, 1.0]).unwrap(),
            Grid::new(vec![0.0, 1.0]).unwrap(),
            Arc::new(FnCost::new(false, |_, _, _| 1.0)),
            Arc::new(kernel),
            1.0,
            0.1,
        )
        .unwrap();
        for q in [QTable::zeros(2, 2), QTable::from_fn(2, 2, |x, a| (x + 3 * a) as f64 * -0.7)] {
            for mu in [ProbabilityVector::uniform(2), ProbabilityVector::point_mass(2, 1)] {
                let m = induced_transition(&q, &mu, &spec);
                assert_eq!(m[(0, 0)], 0.2);
                assert_eq!(m[(1, 0)], 0.6);
            }
        }
    }

    #[test]
    fn op_p_vanishes_at_stationary_and_doubly_stochastic() {
        // Doubly stochastic under any policy: uniform is stationary.
        let kernel = FnKernel::new(3, 1, false, |x, _a, _mu, out: &mut [f64]| {
            let rows = [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]];
            out.copy_from_slice(&rows[x]);
        });
        let spec = ProblemSpec::new(
            Grid::from_range(0.0, 2.0, 1.0).unwrap(),
            Grid::new(vec![0.0]).unwrap(),
            Arc::new(FnCost::new(false, |_, _, _| 0.0)),
            Arc::new(kernel),
            1.0,
            1.0,
        )
        .unwrap();
        let p = op_p(&QTable::zeros(3, 1), &ProbabilityVector::uniform(3), &spec);
        assert!(sup_norm(&p) < 1e-15);

        // Stationary distribution of [[0.6, 0.4], [0.3, 0.7]] is (3/7, 4/7).
        let kernel = FnKernel::new(2, 1, false, |x, _a, _mu, out: &mut [f64]| {
            let rows = [[0.6, 0.4], [0.3, 0.7]];
            out.copy_from_slice(&rows[x]);
        });
        let spec = ProblemSpec::new(
            Grid::new(vec![0.0, 1.0]).unwrap(),
            Grid::new(vec![0.0]).unwrap(),
            Arc::new(FnCost::new(false, |_, _, _| 0.0)),
            Arc::new(kernel),
            1.0,
            1.0,
        )
        .unwrap();
        let mu = ProbabilityVector::new(vec![3.0 / 7.0, 4.0 / 7.0]).unwrap();
        assert!(sup_norm(&op_p(&QTable::zeros(2, 1), &mu, &spec)) < 1e-10);
    }

    #[test]
    fn op_p_matches_naive_double_loop() {
        let spec = random_spec(4, 3, 7);
        let q = QTable::from_fn(4, 3, |x, a| ((x * 7 + a * 3) % 5) as f64);
        let mu = ProbabilityVector::normalized(vec![0.1, 0.4, 0.2, 0.3]).unwrap();
        let policy = greedy_policy(&q);
        let mut naive = vec![0.0; 4];
        let mut row = vec![0.0; 4];
        for x0 in 0..4 {
            spec.kernel.row_into(x0, policy.action_of(x0), &mu, &mut row);
            for x in 0..4 {
                naive[x] += mu.as_slice()[x0] * row[x];
            }
        }
        for x in 0..4 {
            naive[x] -= mu.as_slice()[x];
        }
        let p = op_p(&q, &mu, &spec);
        for (a, b) in p.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn op_t_trivial_cases() {
        let spec = flip_spec();
        let t = op_t(&QTable::zeros(2, 2), &ProbabilityVector::uniform(2), &spec);
        assert_eq!(t.sup_norm(), 0.0);

        let mut spec = random_spec(3, 2, 1);
        spec.cost = Arc::new(FnCost::new(false, |_, _, _| 1.0));
        let t = op_t(&QTable::zeros(3, 2), &ProbabilityVector::uniform(3), &spec);
        assert!(t.values().iter().all(|v| (*v - spec.h).abs() < 1e-15));
    }

    #[test]
    fn tv_distance_examples() {
        let a = ProbabilityVector::new(vec![0.7, 0.3]).unwrap();
        let b = ProbabilityVector::new(vec![0.4, 0.6]).unwrap();
        assert!((tv_distance(&a, &b).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        let p0 = ProbabilityVector::point_mass(3, 0);
        let p2 = ProbabilityVector::point_mass(3, 2);
        assert_eq!(tv_distance(&p0, &p2).unwrap(), 1.0);
        assert!(tv_distance(&a, &ProbabilityVector::uniform(3)).is_err());
    }

    #[test]
    fn tv_equals_sup_over_subsets() {
        // Enumerate every subset of a small space.
        let a = ProbabilityVector::normalized(vec![0.1, 0.5, 0.15, 0.25]).unwrap();
        let b = ProbabilityVector::normalized(vec![0.3, 0.2, 0.4, 0.1]).unwrap();
        let d: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
        let best = (0u32..16)
            .map(|mask| {
                (0..4)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| d[i])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max);
        assert!((tv_distance(&a, &b).unwrap() - best).abs() < 1e-15);
    }

    #[test]
    fn sup_norm_examples() {
        assert_eq!(QTable::zeros(2, 2).sup_norm(), 0.0);
        let mut q = QTable::zeros(2, 2);
        q.set(1, 0, -2.5);
        assert_eq!(q.sup_norm(), 2.5);
        let q = QTable::from_fn(5, 4, |x, a| ((x * 31 + a * 17) % 11) as f64 - 5.5);
        let mut naive: f64 = 0.0;
        for x in 0..5 {
            for a in 0..4 {
                naive = naive.max(q.get(x, a).abs());
            }
        }
        assert_eq!(q.sup_norm(), naive);
    }

    fn simplex(n: usize) -> impl Strategy<Value = ProbabilityVector> {
        prop::collection::vec(0.0f64..1.0, n)
            .prop_filter("positive mass", |w| w.iter().sum::<f64>() > 1e-6)
            .prop_map(|w| ProbabilityVector::normalized(w).unwrap())
    }

    proptest! {
        #[test]
        fn induced_rows_sum_to_one(
            qv in prop::collection::vec(-5.0f64..5.0, 12),
            mu in simplex(4),
            seed in 0u64..50,
        ) {
            let spec = random_spec(4, 3, seed);
            let q = QTable::from_vec(4, 3, qv).unwrap();
            let m = induced_transition(&q, &mu, &spec);
            for x in 0..4 {
                let s: f64 = m.row(x).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            let p = op_p(&q, &mu, &spec);
            prop_assert!(p.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn greedy_invariant_under_state_offsets(
            qv in prop::collection::vec(-5.0f64..5.0, 12),
            offsets in prop::collection::vec(-100.0f64..100.0, 4),
        ) {
            let q = QTable::from_vec(4, 3, qv).unwrap();
            let shifted = QTable::from_fn(4, 3, |x, a| q.get(x, a) + offsets[x]);
            // Offsets can perturb near-ties by rounding; only compare rows with a clear winner.
            let p = greedy_policy(&q);
            let s = greedy_policy(&shifted);
            for x in 0..4 {
                let row = q.row(x);
                let best = row[p.action_of(x)];
                let gap = row.iter().enumerate()
                    .filter(|(a, _)| *a != p.action_of(x))
                    .map(|(_, v)| v - best)
                    .fold(f64::INFINITY, f64::min);
                if gap > 1e-9 {
                    prop_assert_eq!(p.action_of(x), s.action_of(x));
                }
            }
        }

        #[test]
        fn tv_triangle_inequality(a in simplex(5), b in simplex(5), c in simplex(5)) {
            let ab = tv_distance(&a, &b).unwrap();
            let bc = tv_distance(&b, &c).unwrap();
            let ac = tv_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-15);
            prop_assert!((ab - tv_distance(&b, &a).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn op_t_respects_sup_bound(
            qv in prop::collection::vec(-5.0f64..5.0, 12),
            mu in simplex(4),
            seed in 0u64..50,
        ) {
            let spec = random_spec(4, 3, seed);
            let q = QTable::from_vec(4, 3, qv).unwrap();
            let f_sup = sup_norm(&spec.cost_table(&mu));
            let t = op_t(&q, &mu, &spec);
            prop_assert!(t.sup_norm() <= spec.h * f_sup + (spec.discount() + 1.0) * q.sup_norm() + 1e-12);
        }
    }
}
