//! Problem builders: the quadratic benchmark on a discretised controlled
//! diffusion, and generic tabular problems read from TOML files.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostFunction, Grid, ProbabilityVector, ProblemSpec, TransitionKernel};

/// Mean of the one-step Gaussian transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// `x + a`, as written for the benchmark.
    #[default]
    #[serde(alias = "direct")]
    MeanXPlusA,
    /// `x + a h`, the Euler-Maruyama mean of `dX = a dt + sigma dB`.
    #[serde(alias = "euler")]
    MeanXPlusAh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub h: f64,
    pub grid_step: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Offset applied to the state grid.
    pub x_c: f64,
    pub drift_mode: DriftMode,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            c1: 0.25,
            c2: 1.5,
            c3: 0.5,
            c4: 0.6,
            c5: 5.0,
            gamma: 1.0,
            sigma: 0.3,
            h: 0.01,
            grid_step: 0.1,
            x_min: -2.0,
            x_max: 2.0,
            a_min: -2.0,
            a_max: 2.0,
            x_c: 0.0,
            drift_mode: DriftMode::MeanXPlusA,
        }
    }
}

impl BenchmarkParams {
    /// 21 x 21 grid (step 0.2) for quick runs.
    pub fn desk() -> Self {
        Self {
            grid_step: 0.2,
            ..Self::default()
        }
    }

    pub fn state_grid(&self) -> Result<Grid> {
        Grid::from_range(self.x_min + self.x_c, self.x_max + self.x_c, self.grid_step)
    }

    pub fn action_grid(&self) -> Result<Grid> {
        Grid::from_range(self.a_min, self.a_max, self.grid_step)
    }

    fn validate(&self) -> Result<()> {
        if !(self.grid_step > 0.0) {
            return Err(Error::InvalidParameter("grid_step must be positive".into()));
        }
        if !(self.sigma >= 0.0) || !(self.h > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidParameter(
                "sigma must be nonnegative, h and gamma positive".into(),
            ));
        }
        Ok(())
    }
}

/// `f(x, a, mu) = a^2/2 + c1 (x - c2 m)^2 + c3 (x - c4)^2 + c5 m^2` where
/// `m` is the mean state under `mu`.
pub fn benchmark_cost(x: f64, a: f64, m: f64, p: &BenchmarkParams) -> f64 {
    0.5 * a * a + p.c1 * (x - p.c2 * m).powi(2) + p.c3 * (x - p.c4).powi(2) + p.c5 * m * m
}

#[derive(Debug, Clone)]
pub struct BenchmarkCost {
    params: BenchmarkParams,
    states: Vec<f64>,
    actions: Vec<f64>,
}

impl BenchmarkCost {
    pub fn new(params: BenchmarkParams, states: &Grid, actions: &Grid) -> Self {
        Self {
            params,
            states: states.labels().to_vec(),
            actions: actions.labels().to_vec(),
        }
    }
}

impl CostFunction for BenchmarkCost {
    fn eval(&self, x: usize, a: usize, mu: &ProbabilityVector) -> f64 {
        let m = mu.mean(&self.states);
        benchmark_cost(self.states[x], self.actions[a], m, &self.params)
    }

    fn table(&self, mu: &ProbabilityVector, n_states: usize, n_actions: usize) -> Vec<f64> {
        let m = mu.mean(&self.states);
        let mut out = Vec::with_capacity(n_states * n_actions);
        for &x in &self.states {
            for &a in &self.actions {
                out.push(benchmark_cost(x, a, m, &self.params));
            }
        }
        out
    }
}

/// `log P(Z > z)` for a standard normal `Z`, accurate far into the tail.
pub fn log_normal_sf(z: f64) -> f64 {
    if z < 30.0 {
        (0.5 * libm::erfc(z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills-ratio expansion; the next omitted term is below 1e-12 here.
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
            + 105.0 / (z2 * z2 * z2 * z2);
        -0.5 * z2 - 0.5 * (2.0 * std::f64::consts::PI).ln() - z.ln() + series.ln()
    }
}

/// `log P(lo < Z < hi)` for `Z ~ N(mean, sd^2)`, `sd > 0`.
pub fn log_gaussian_interval(lo: f64, hi: f64, mean: f64, sd: f64) -> f64 {
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    if a >= 0.0 {
        let la = log_normal_sf(a);
        let lb = log_normal_sf(b);
        la + (-(lb - la).exp()).ln_1p()
    } else if b <= 0.0 {
        let la = log_normal_sf(-b);
        let lb = log_normal_sf(-a);
        la + (-(lb - la).exp()).ln_1p()
    } else {
        // Both tails are at most one half; the complement is well conditioned.
        (1.0 - (log_normal_sf(-a).exp() + log_normal_sf(b).exp())).ln()
    }
}

/// Precomputed, mu-independent kernel on a state grid.
#[derive(Clone)]
pub struct SdeKernel {
    n_states: usize,
    n_actions: usize,
    rows: Vec<f64>,
}

impl fmt::Debug for SdeKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeKernel")
            .field("n_states", &self.n_states)
            .field("n_actions", &self.n_actions)
            .finish()
    }
}

impl SdeKernel {
    pub fn rows(&self) -> &[f64] {
        &self.rows
    }
}

impl TransitionKernel for SdeKernel {
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn row_into(&self, x: usize, a: usize, _mu: &ProbabilityVector, out: &mut [f64]) {
        let i = (x * self.n_actions + a) * self.n_states;
        out.copy_from_slice(&self.rows[i..i + self.n_states]);
    }
    fn depends_on_mu(&self) -> bool {
        false
    }
    fn snapshot(&self, _mu: &ProbabilityVector) -> Cow<'_, [f64]> {
        Cow::Borrowed(&self.rows)
    }
}

/// Bins `N(mean, sigma^2 h)` onto the state grid: state `x'` receives the mass
/// of `[x' - step/2, x' + step/2]` and each row is renormalised.
pub fn build_sde_kernel(params: &BenchmarkParams) -> Result<SdeKernel> {
    params.validate()?;
    let states = params.state_grid()?;
    let actions = params.action_grid()?;
    let (ns, na) = (states.len(), actions.len());
    let sd = params.sigma * params.h.sqrt();
    let half = 0.5 * params.grid_step;
    if sd == 0.0 {
        log::warn!("zero transition variance: using the deterministic nearest-bin kernel");
    }

    let mut rows = vec![0.0; ns * na * ns];
    let mut logs = vec![0.0; ns];
    for (xi, &x) in states.labels().iter().enumerate() {
        for (ai, &a) in actions.labels().iter().enumerate() {
            let mean = match params.drift_mode {
                DriftMode::MeanXPlusA => x + a,
                DriftMode::MeanXPlusAh => x + a * params.h,
            };
            let row = &mut rows[(xi * na + ai) * ns..(xi * na + ai + 1) * ns];
            if sd == 0.0 {
                row[nearest_index(states.labels(), mean)] = 1.0;
                continue;
            }
            for (l, &y) in logs.iter_mut().zip(states.labels()) {
                *l = log_gaussian_interval(y - half, y + half, mean, sd);
            }
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logs.iter().map(|l| (l - top).exp()).sum();
            for (r, l) in row.iter_mut().zip(&logs) {
                *r = (l - top).exp() / total;
            }
        }
    }
    Ok(SdeKernel {
        n_states: ns,
        n_actions: na,
        rows,
    })
}

fn nearest_index(labels: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, l) in labels.iter().enumerate() {
        if (l - v).abs() < (labels[best] - v).abs() {
            best = i;
        }
    }
    best
}

pub fn build_benchmark_spec(params: &BenchmarkParams) -> Result<ProblemSpec> {
    let kernel = build_sde_kernel(params)?;
    let states = params.state_grid()?;
    let actions = params.action_grid()?;
    let cost = BenchmarkCost::new(params.clone(), &states, &actions);
    ProblemSpec::new(
        states,
        actions,
        Arc::new(cost),
        Arc::new(kernel),
        params.gamma,
        params.h,
    )
}

// ---------------------------------------------------------------------------
// Tabular problem files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    Mean,
    SecondMoment,
    MassAt,
}

/// A scalar functional of the population distribution, shifted by `offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Moment {
    pub functional: MomentKind,
    /// State label for `mass_at`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<f64>,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone)]
struct ResolvedMoment {
    kind: MomentKind,
    at_index: usize,
    offset: f64,
}

impl ResolvedMoment {
    fn resolve(m: &Moment, states: &Grid, location: &str) -> Result<Self> {
        let at_index = match (m.functional, m.at) {
            (MomentKind::MassAt, Some(at)) => states
                .labels()
                .iter()
                .position(|l| (l - at).abs() <= 1e-12 * (1.0 + at.abs()))
                .ok_or_else(|| schema(location, format!("`at = {at}` is not a state label")))?,
            (MomentKind::MassAt, None) => {
                return Err(schema(location, "`mass_at` requires an `at` state label"))
            }
            (_, Some(_)) => {
                return Err(schema(location, "`at` is only valid for `mass_at`"));
            }
            (_, None) => 0,
        };
        Ok(Self {
            kind: m.functional,
            at_index,
            offset: m.offset,
        })
    }

    fn value(&self, mu: &ProbabilityVector, labels: &[f64]) -> f64 {
        let raw = match self.kind {
            MomentKind::Mean => mu.mean(labels),
            MomentKind::SecondMoment => mu
                .as_slice()
                .iter()
                .zip(labels)
                .map(|(w, x)| w * x * x)
                .sum(),
            MomentKind::MassAt => mu.as_slice()[self.at_index],
        };
        raw - self.offset
    }

    /// Range of `value` over the simplex.
    fn range(&self, labels: &[f64]) -> (f64, f64) {
        let (lo, hi) = match self.kind {
            MomentKind::Mean => (labels[0], labels[labels.len() - 1]),
            MomentKind::SecondMoment => labels.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), x| {
                (lo.min(x * x), hi.max(x * x))
            }),
            MomentKind::MassAt => (0.0, 1.0),
        };
        (lo - self.offset, hi - self.offset)
    }
}

/// Quadratic cost parameters (the benchmark form) for tabular files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticCost {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostCoupling {
    #[serde(flatten)]
    pub moment: Moment,
    /// Same weight for every (x, a).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// Per-(x, a) weights, `n_states` rows of `n_actions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// `n_states` rows of `n_actions` entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticCost>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coupling: Vec<CostCoupling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelPerturbation {
    #[serde(flatten)]
    pub moment: Moment,
    /// `n_states * n_actions` rows of `n_states` entries, each summing to 0.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    /// `n_states * n_actions` stochastic rows; row `x * n_actions + a`.
    pub base: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbation: Vec<KernelPerturbation>,
}

/// On-disk tabular problem:
/// `p(x'|x,a,mu) = base(x'|x,a) + sum_j m_j(mu) pert_j(x'|x,a)` and
/// `f(x,a,mu) = table(x,a) + quadratic(x,a,mean) + sum_k w_k(x,a) m_k(mu)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularProblem {
    pub gamma: f64,
    pub h: f64,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub cost: CostSection,
    pub kernel: KernelSection,
}

/// Load-time findings that do not prevent building the problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
    /// Some reachable moment values may produce negative kernel entries,
    /// which are then clamped and the row renormalised.
    pub may_clamp: bool,
}

const ROW_TOL: f64 = 1e-9;

fn schema(location: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        location: location.to_string(),
        message: message.into(),
    }
}

#[derive(Debug)]
pub struct TabularKernel {
    n_states: usize,
    n_actions: usize,
    labels: Vec<f64>,
    base: Vec<f64>,
    perturbations: Vec<(ResolvedMoment, Vec<f64>)>,
    clamp_events: AtomicUsize,
}

impl TabularKernel {
    /// Number of rows that needed clamping since construction.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events.load(Ordering::Relaxed)
    }

    fn fill_row(&self, i: usize, coeffs: &[f64], out: &mut [f64]) {
        let ns = self.n_states;
        out.copy_from_slice(&self.base[i * ns..(i + 1) * ns]);
        let mut negative = false;
        for ((_, rows), c) in self.perturbations.iter().zip(coeffs) {
            for (o, d) in out.iter_mut().zip(&rows[i * ns..(i + 1) * ns]) {
                *o += c * d;
            }
        }
        for o in out.iter_mut() {
            if *o < 0.0 {
                *o = 0.0;
                negative = true;
            }
        }
        if negative {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            let s: f64 = out.iter().sum();
            out.iter_mut().for_each(|o| *o /= s);
        }
    }

    fn coefficients(&self, mu: &ProbabilityVector) -> Vec<f64> {
        self.perturbations
            .iter()
            .map(|(m, _)| m.value(mu, &self.labels))
            .collect()
    }
}

impl TransitionKernel for TabularKernel {
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn row_into(&self, x: usize, a: usize, mu: &ProbabilityVector, out: &mut [f64]) {
        let coeffs = self.coefficients(mu);
        self.fill_row(x * self.n_actions + a, &coeffs, out);
    }
    fn depends_on_mu(&self) -> bool {
        !self.perturbations.is_empty()
    }
    fn snapshot(&self, mu: &ProbabilityVector) -> Cow<'_, [f64]> {
        if self.perturbations.is_empty() {
            return Cow::Borrowed(&self.base);
        }
        let coeffs = self.coefficients(mu);
        let ns = self.n_states;
        let mut out = vec![0.0; ns * self.n_actions * ns];
        for (i, row) in out.chunks_mut(ns).enumerate() {
            self.fill_row(i, &coeffs, row);
        }
        Cow::Owned(out)
    }
}

#[derive(Debug)]
pub struct TabularCost {
    n_actions: usize,
    labels: Vec<f64>,
    action_labels: Vec<f64>,
    table: Vec<f64>,
    quadratic: Option<BenchmarkParams>,
    coupling: Vec<(ResolvedMoment, Vec<f64>)>,
}

impl CostFunction for TabularCost {
    fn eval(&self, x: usize, a: usize, mu: &ProbabilityVector) -> f64 {
        let i = x * self.n_actions + a;
        let mut v = self.table[i];
        if let Some(p) = &self.quadratic {
            v += benchmark_cost(self.labels[x], self.action_labels[a], mu.mean(&self.labels), p);
        }
        for (m, w) in &self.coupling {
            v += w[i] * m.value(mu, &self.labels);
        }
        v
    }

    fn depends_on_mu(&self) -> bool {
        !self.coupling.is_empty() || self.quadratic.is_some()
    }

    fn table(&self, mu: &ProbabilityVector, n_states: usize, n_actions: usize) -> Vec<f64> {
        let mut out = self.table.clone();
        if let Some(p) = &self.quadratic {
            let m = mu.mean(&self.labels);
            for x in 0..n_states {
                for a in 0..n_actions {
                    out[x * n_actions + a] +=
                        benchmark_cost(self.labels[x], self.action_labels[a], m, p);
                }
            }
        }
        for (m, w) in &self.coupling {
            let v = m.value(mu, &self.labels);
            out.iter_mut().zip(w).for_each(|(o, wi)| *o += wi * v);
        }
        out
    }
}

fn check_matrix(rows: &[Vec<f64>], n_rows: usize, n_cols: usize, location: &str) -> Result<()> {
    if rows.len() != n_rows {
        return Err(schema(
            location,
            format!("expected {n_rows} rows, found {}", rows.len()),
        ));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n_cols {
            return Err(schema(
                &format!("{location}[{i}]"),
                format!("expected {n_cols} entries, found {}", r.len()),
            ));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(schema(&format!("{location}[{i}]"), "non-finite entry"));
        }
    }
    Ok(())
}

impl TabularProblem {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// Checks the schema and builds the runtime problem.
    pub fn build(&self) -> Result<(ProblemSpec, ValidationReport)> {
        let states = Grid::new(self.states.clone()).map_err(|e| schema("states", e.to_string()))?;
        let actions =
            Grid::new(self.actions.clone()).map_err(|e| schema("actions", e.to_string()))?;
        let (ns, na) = (states.len(), actions.len());
        if !(self.gamma > 0.0) {
            return Err(schema("gamma", "must be positive"));
        }
        if !(self.h > 0.0) {
            return Err(schema("h", "must be positive"));
        }
        let mut report = ValidationReport::default();

        // Kernel.
        check_matrix(&self.kernel.base, ns * na, ns, "kernel.base")?;
        for (i, r) in self.kernel.base.iter().enumerate() {
            let loc = format!("kernel.base[{i}]");
            if let Some(v) = r.iter().find(|v| **v < 0.0) {
                return Err(schema(&loc, format!("negative probability {v}")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(schema(&loc, format!("row sums to {s}, expected 1")));
            }
        }
        let mut perturbations = Vec::new();
        for (j, p) in self.kernel.perturbation.iter().enumerate() {
            let loc = format!("kernel.perturbation[{j}]");
            let moment = ResolvedMoment::resolve(&p.moment, &states, &loc)?;
            check_matrix(&p.rows, ns * na, ns, &format!("{loc}.rows"))?;
            for (i, r) in p.rows.iter().enumerate() {
                let s: f64 = r.iter().sum();
                if s.abs() > ROW_TOL {
                    return Err(schema(
                        &format!("{loc}.rows[{i}]"),
                        format!("perturbation row sums to {s}, expected 0"),
                    ));
                }
            }
            perturbations.push((moment, p.rows.concat()));
        }
        let base: Vec<f64> = self.kernel.base.concat();
        let base: Vec<f64> = base
            .chunks(ns)
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect();

        // Corners of the box of reachable moment values bound every entry,
        // since entries are affine in the moments.
        if !perturbations.is_empty() && perturbations.len() <= 16 {
            let ranges: Vec<(f64, f64)> = perturbations
                .iter()
                .map(|(m, _)| m.range(states.labels()))
                .collect();
            let mut offending = BTreeSet::new();
            for corner in 0u32..(1 << ranges.len()) {
                for i in 0..ns * na {
                    for k in 0..ns {
                        let v = base[i * ns + k]
                            + perturbations
                                .iter()
                                .zip(&ranges)
                                .enumerate()
                                .map(|(j, ((_, rows), (lo, hi)))| {
                                    let c = if corner & (1 << j) != 0 { *hi } else { *lo };
                                    c * rows[i * ns + k]
                                })
                                .sum::<f64>();
                        if !(-1e-12..=1.0 + 1e-12).contains(&v) {
                            offending.insert(i);
                        }
                    }
                }
            }
            if !offending.is_empty() {
                report.may_clamp = true;
                report.warnings.push(format!(
                    "kernel rows {:?} may leave [0, 1] for some distributions; they will be clamped and renormalised",
                    offending.iter().take(10).collect::<Vec<_>>()
                ));
            }
        } else if perturbations.len() > 16 {
            report
                .warnings
                .push("too many perturbation blocks to check clamping exhaustively".into());
        }

        // Cost.
        let mut table = vec![0.0; ns * na];
        if let Some(t) = &self.cost.table {
            check_matrix(t, ns, na, "cost.table")?;
            table = t.concat();
        }
        let quadratic = self.cost.quadratic.as_ref().map(|q| BenchmarkParams {
            c1: q.c1,
            c2: q.c2,
            c3: q.c3,
            c4: q.c4,
            c5: q.c5,
            ..BenchmarkParams::default()
        });
        if self.cost.table.is_none() && quadratic.is_none() && self.cost.coupling.is_empty() {
            return Err(schema("cost", "needs a `table`, `quadratic` or `coupling` entry"));
        }
        let mut coupling = Vec::new();
        for (k, c) in self.cost.coupling.iter().enumerate() {
            let loc = format!("cost.coupling[{k}]");
            let moment = ResolvedMoment::resolve(&c.moment, &states, &loc)?;
            let w = match (&c.weight, &c.weights) {
                (Some(w), None) => vec![*w; ns * na],
                (None, Some(rows)) => {
                    check_matrix(rows, ns, na, &format!("{loc}.weights"))?;
                    rows.concat()
                }
                _ => return Err(schema(&loc, "give exactly one of `weight` or `weights`")),
            };
            coupling.push((moment, w));
        }

        let kernel = TabularKernel {
            n_states: ns,
            n_actions: na,
            labels: states.labels().to_vec(),
            base,
            perturbations,
            clamp_events: AtomicUsize::new(0),
        };
        let cost = TabularCost {
            n_actions: na,
            labels: states.labels().to_vec(),
            action_labels: actions.labels().to_vec(),
            table,
            quadratic,
            coupling,
        };
        for w in &report.warnings {
            log::warn!("{w}");
        }
        let spec = ProblemSpec::new(
            states,
            actions,
            Arc::new(cost),
            Arc::new(kernel),
            self.gamma,
            self.h,
        )?;
        Ok((spec, report))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("tabular problem serialises to TOML")
    }
}

pub fn parse_problem(text: &str) -> Result<TabularProblem> {
    toml::from_str(text).map_err(|e| {
        let location = e
            .span()
            .map(|s| {
                let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                format!("line {line}")
            })
            .unwrap_or_else(|| "document".into());
        schema(&location, e.message())
    })
}

/// Reads and validates a tabular problem file.
pub fn load_problem(path: &Path) -> Result<(ProblemSpec, TabularProblem, ValidationReport)> {
    let text = std::fs::read_to_string(path)?;
    let problem = parse_problem(&text)?;
    let (spec, report) = problem.build()?;
    Ok((spec, problem, report))
}

pub fn save_problem(problem: &TabularProblem, path: &Path) -> Result<()> {
    std::fs::write(path, problem.to_toml())?;
    Ok(())
}
