//! Checkpoints and CSV output.
//!
//! Every CSV file starts with a `# mfql <version> <unix-seconds>` comment
//! line; readers skip lines starting with `#`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{RunRecord, ToyTrajectory};
use crate::engine::{toy_op_p, toy_op_t};
use crate::error::{Error, Result};
use crate::learner::LearnerState;
use crate::model::{ProbabilityVector, ProblemSpec, QTable};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn header_line() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("# mfql {VERSION} {secs}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header_line())?;
    Ok(w)
}

/// Writes serializable rows as CSV below the version comment.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One row of a trajectory file. `res_p_l1` is the full l1 norm of the
/// population residual, twice its total-variation norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub k: usize,
    pub lyapunov: Option<f64>,
    pub q_gap: Option<f64>,
    pub mu_gap: Option<f64>,
    pub res_t_sup: f64,
    pub res_p_l1: f64,
    pub mu: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// `k,lyapunov,q_gap,mu_gap,res_T_sup,res_P_l1,mu_0,...,mu_{n-1}`.
pub fn write_trajectory(path: &Path, record: &RunRecord) -> Result<()> {
    let n = record.final_mu.len();
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = ["k", "lyapunov", "q_gap", "mu_gap", "res_T_sup", "res_P_l1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n).map(|i| format!("mu_{i}")));
    w.write_record(&header)?;
    for s in &record.steps {
        let mut row = vec![
            s.k.to_string(),
            opt(s.lyapunov.map(|l| l.value)),
            opt(s.lyapunov.map(|l| l.q_gap)),
            opt(s.lyapunov.map(|l| l.mu_gap)),
            format!("{:e}", s.res_t_sup),
            format!("{:e}", 2.0 * s.res_p_tv),
        ];
        row.extend(s.mu.as_slice().iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let parse = |s: &str, line: usize| -> Result<f64> {
        s.parse().map_err(|_| Error::Schema {
            location: format!("{}:{line}", path.display()),
            message: format!("not a number: {s:?}"),
        })
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 3;
        if rec.len() < 6 {
            return Err(Error::Schema {
                location: format!("{}:{line}", path.display()),
                message: "expected at least 6 columns".into(),
            });
        }
        let optional = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() { Ok(None) } else { parse(s, line).map(Some) }
        };
        out.push(TrajectoryRow {
            k: parse(&rec[0], line)? as usize,
            lyapunov: optional(&rec[1])?,
            q_gap: optional(&rec[2])?,
            mu_gap: optional(&rec[3])?,
            res_t_sup: parse(&rec[4], line)?,
            res_p_l1: parse(&rec[5], line)?,
            mu: rec.iter().skip(6).map(|s| parse(s, line)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct ToyRow {
    k: usize,
    q: f64,
    mu: f64,
    op_p: f64,
    op_t: f64,
}

pub fn write_toy_trajectory(path: &Path, traj: &ToyTrajectory) -> Result<()> {
    let rows: Vec<ToyRow> = traj
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| ToyRow { k, q: s.q, mu: s.mu, op_p: toy_op_p(*s), op_t: toy_op_t(*s) })
        .collect();
    write_rows(path, &rows)
}

/// Serialized learner state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub state_labels: Vec<f64>,
    pub action_labels: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub mu_per_step: Vec<ProbabilityVector>,
    pub episode: usize,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn capture(state: &LearnerState, spec: &ProblemSpec) -> Self {
        Self {
            version: VERSION.to_string(),
            state_labels: spec.states.labels().to_vec(),
            action_labels: spec.actions.labels().to_vec(),
            q: state.q.to_rows(),
            mu_per_step: state.mu_per_step.clone(),
            episode: state.episode,
            rng: state.rng.clone(),
        }
    }

    /// Rebuilds the learner state, rejecting checkpoints taken on a
    /// different grid.
    pub fn restore(self, spec: &ProblemSpec) -> Result<LearnerState> {
        if self.state_labels != spec.states.labels() || self.action_labels != spec.actions.labels() {
            return Err(Error::Schema {
                location: "checkpoint".into(),
                message: "grid labels differ from the problem".into(),
            });
        }
        let q = QTable::from_rows(&self.q)?;
        spec.check_q(&q)?;
        for mu in &self.mu_per_step {
            spec.check_mu(mu)?;
        }
        if self.mu_per_step.is_empty() {
            return Err(Error::Schema {
                location: "checkpoint.mu_per_step".into(),
                message: "empty".into(),
            });
        }
        Ok(LearnerState { q, mu_per_step: self.mu_per_step, episode: self.episode, rng: self.rng })
    }
}

pub fn save_checkpoint(path: &Path, state: &LearnerState, spec: &ProblemSpec) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, &Checkpoint::capture(state, spec))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, spec: &ProblemSpec) -> Result<LearnerState> {
    let text = std::fs::read_to_string(path)?;
    let cp: Checkpoint = serde_json::from_str(&text)?;
    cp.restore(spec)
}
