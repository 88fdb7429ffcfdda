//! Experiment configuration files.
//!
//! Every section is optional. Unknown keys are rejected so that a typo does
//! not silently fall back to a default.

use std::path::{Path, PathBuf};

use mfql::environments::{BenchmarkParams, DriftMode};
use mfql::learner::EnvMu;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub toy: ToyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    #[default]
    Benchmark,
    Tabular,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default)]
    pub kind: ProblemKind,
    /// Tabular problem file, relative to the config file.
    pub path: Option<PathBuf>,
    /// Benchmark parameters; missing fields take the desk-scale defaults.
    pub benchmark: Option<BenchmarkParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Exact-operator iteration.
    #[default]
    Engine,
    /// Sample-based episodic learner.
    Learner,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub rho_mu: f64,
    pub rho_q: f64,
    /// Engine updates.
    pub iterations: usize,
    pub record_every: usize,
    pub stop_on_tolerance: bool,
    pub tol: f64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub epsilon: f64,
    pub env_mu: EnvMu,
    /// Evaluate the Lyapunov function against the oracle fixed points at
    /// every recorded iterate.
    pub lyapunov: bool,
    /// Lyapunov weight; suggested from the declared constants when absent.
    pub weight: Option<f64>,
    /// Learner checkpoint to resume from.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Engine,
            rho_mu: 0.0001,
            rho_q: 0.02,
            iterations: 10_000,
            record_every: 100,
            stop_on_tolerance: false,
            tol: 1e-10,
            episodes: 100,
            steps_per_episode: 200,
            epsilon: 0.1,
            env_mu: EnvMu::Current,
            lyapunov: false,
            weight: None,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// `[rho_mu, rho_q]` pairs.
    pub pairs: Vec<[f64; 2]>,
    pub mode: Mode,
    pub iterations: usize,
    pub record_every: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub epsilon: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            pairs: vec![[0.0001, 0.02], [0.5, 0.0001]],
            mode: Mode::Engine,
            iterations: 10_000,
            record_every: 100,
            episodes: 100,
            steps_per_episode: 200,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub damping: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 2_000,
            damping: 0.5,
        }
    }
}

/// Constants that override the sampled estimates.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredConstants {
    pub beta: Option<f64>,
    pub l_p: Option<f64>,
    pub l_q: Option<f64>,
    pub l_f: Option<f64>,
    pub f_sup: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    /// `[rho_mu, rho_q]` pairs to evaluate the contraction constants at.
    pub pairs: Vec<[f64; 2]>,
    /// Random Dirichlet distributions added to the probe set.
    pub random_distributions: usize,
    /// Random Q tables used for the Q-Lipschitz estimate.
    pub random_q: usize,
    pub declared: DeclaredConstants,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            pairs: vec![[0.0001, 0.02], [0.5, 0.0001]],
            random_distributions: 20,
            random_q: 10,
            declared: DeclaredConstants::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// `[q, mu]` starting points.
    pub initial: Vec<[f64; 2]>,
    /// `[rho_mu, rho_q]` pairs.
    pub pairs: Vec<[f64; 2]>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            initial: vec![[0.0, -0.2], [0.3, 0.4], [0.75, 0.25]],
            pairs: vec![[0.001, 1.0], [1.0, 0.001]],
            max_iters: 100_000,
            tol: 1e-12,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths inside the file refer to the file's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = cfg.problem.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.run.resume.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn benchmark_params(&self, drift: Option<DriftMode>) -> BenchmarkParams {
        let mut p = self.problem.benchmark.clone().unwrap_or_else(BenchmarkParams::desk);
        if let Some(d) = drift {
            p.drift_mode = d;
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_uses_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.problem.kind, ProblemKind::Benchmark);
        assert_eq!(cfg.run.mode, Mode::Engine);
        assert_eq!(cfg.toy.initial.len(), 3);
        assert_eq!(cfg.benchmark_params(None).grid_step, 0.2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::parse("[run]\nrho_mu = 0.1\nrho_qq = 0.2\n").unwrap_err();
        assert!(err.contains("rho_qq"), "{err}");
        assert!(Config::parse("[problem.benchmark]\nsigmaa = 1.0\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let cfg = Config::parse(
            r#"
seed = 7
[problem]
kind = "tabular"
path = "p.toml"
[run]
mode = "learner"
env_mu = "previous"
[sweep]
pairs = [[0.1, 0.2]]
[diagnose.declared]
l_q = 1e-4
[problem.benchmark]
drift_mode = "euler"
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.problem.kind, ProblemKind::Tabular);
        assert_eq!(cfg.run.env_mu, EnvMu::Previous);
        assert_eq!(cfg.sweep.pairs, vec![[0.1, 0.2]]);
        assert_eq!(cfg.diagnose.declared.l_q, Some(1e-4));
        let p = cfg.benchmark_params(None);
        assert_eq!(p.drift_mode, DriftMode::MeanXPlusAh);
        // Fields not given fall back to the full-scale defaults of the
        // parameter struct, not the desk grid.
        assert_eq!(p.grid_step, 0.1);
        assert_eq!(cfg.benchmark_params(Some(DriftMode::MeanXPlusA)).drift_mode, DriftMode::MeanXPlusA);
    }
}
