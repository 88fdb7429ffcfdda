use std::path::{Path, PathBuf};

use mfql::diagnostics::{
    estimate_beta_over, estimate_lf, estimate_lipschitz, f_sup, lyapunov, probe_distributions,
    suggest_weight, theorem_constants, uniqueness_check, weight_bounds, AssumptionConstants,
    LyapunovValue, Provenance, ProvenanceFlags,
};
use mfql::engine::{run_observed, toy_run, IterationConfig, ToyState, TOY_MFC_POINT, TOY_MFG_POINT, TOY_SADDLE};
use mfql::environments::{build_benchmark_spec, load_problem};
use mfql::io::{load_checkpoint, save_checkpoint, write_rows, write_toy_trajectory, write_trajectory};
use mfql::learner::{init_learner, train_observed, EpisodeConfig};
use mfql::oracles::{mfc_solve, mfg_solve, DampedOptions, FixedPoint, NestedOptions};
use mfql::{greedy_policy, tv_distance, LearningRates, ProbabilityVector, ProblemSpec, QTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, Mode, ProblemKind};
use crate::{CliError, CommonArgs};

/// Resolved configuration shared by every subcommand.
pub struct Context {
    pub cfg: Config,
    pub spec: ProblemSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(mut cfg: Config, args: &CommonArgs) -> Result<Self, CliError> {
        if let Some(e) = args.env_mu {
            cfg.run.env_mu = e.into();
        }
        let spec = match cfg.problem.kind {
            ProblemKind::Benchmark => build_benchmark_spec(&cfg.benchmark_params(args.drift.map(Into::into)))?,
            ProblemKind::Tabular => {
                if args.drift.is_some() {
                    return Err(CliError::Config("--drift only applies to the benchmark problem".into()));
                }
                let path = cfg
                    .problem
                    .path
                    .as_ref()
                    .ok_or_else(|| CliError::Config("tabular problem needs `problem.path`".into()))?;
                let (spec, _, report) = load_problem(path)?;
                for w in &report.warnings {
                    log::warn!("{w}");
                }
                spec
            }
        };
        let workers = args.workers.or(cfg.workers).unwrap_or(1);
        if workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Ok(Self {
            seed: args.seed.or(cfg.seed).unwrap_or(0),
            out: args.out.clone(),
            workers,
            spec,
            cfg,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn nested(&self) -> NestedOptions {
        NestedOptions {
            tol: self.cfg.oracle.tol,
            max_iters: self.cfg.oracle.max_iters,
            damping: self.cfg.oracle.damping,
            ..Default::default()
        }
    }

    fn solve_oracles(&self) -> Result<(FixedPoint, FixedPoint), CliError> {
        let opts = self.nested();
        let n = self.spec.n_states();
        let game = mfg_solve(&self.spec, &opts, ProbabilityVector::uniform(n))?;
        let control = mfc_solve(&self.spec, &opts, self.spec.zero_q())?;
        Ok((game, control))
    }
}

fn rates(pair: [f64; 2]) -> Result<LearningRates, CliError> {
    Ok(LearningRates::new(pair[0], pair[1])?)
}

/// Distinct Q tables of the oracle solutions, standing in for the
/// fixed-point set.
fn fixed_point_set(game: &FixedPoint, control: &FixedPoint) -> Vec<QTable> {
    let mut out = vec![game.q.clone()];
    if game.q.sup_distance(&control.q).map_or(true, |d| d > 1e-8) {
        out.push(control.q.clone());
    }
    out
}

#[derive(Serialize)]
struct QRow<'a> {
    solver: &'a str,
    state: f64,
    action: f64,
    q: f64,
}

#[derive(Serialize)]
struct MuRow<'a> {
    solver: &'a str,
    state: f64,
    mu: f64,
    value: f64,
    greedy_action: f64,
}

fn q_rows<'a>(solver: &'a str, q: &QTable, spec: &ProblemSpec) -> Vec<QRow<'a>> {
    let (s, a) = (spec.states.labels(), spec.actions.labels());
    (0..q.n_states())
        .flat_map(|x| (0..q.n_actions()).map(move |j| (x, j)))
        .map(|(x, j)| QRow { solver, state: s[x], action: a[j], q: q.get(x, j) })
        .collect()
}

fn mu_rows<'a>(solver: &'a str, q: &QTable, mu: &ProbabilityVector, spec: &ProblemSpec) -> Vec<MuRow<'a>> {
    let policy = greedy_policy(q);
    let values = q.row_minima();
    (0..q.n_states())
        .map(|x| MuRow {
            solver,
            state: spec.states.labels()[x],
            mu: mu.as_slice()[x],
            value: values[x],
            greedy_action: spec.actions.labels()[policy.action_of(x)],
        })
        .collect()
}

fn io_err(e: mfql::Error) -> CliError {
    CliError::Config(format!("writing output: {e}"))
}

fn write<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    write_rows(path, rows).map_err(io_err)
}

pub fn run(ctx: &Context) -> Result<(), CliError> {
    let rc = &ctx.cfg.run;
    let rates = rates([rc.rho_mu, rc.rho_q])?;
    let spec = &ctx.spec;
    let fixed = if rc.lyapunov {
        let (g, c) = ctx.solve_oracles()?;
        fixed_point_set(&g, &c)
    } else {
        Vec::new()
    };
    let weight = rc.weight.unwrap_or(1.0);
    let inner = DampedOptions::default();
    let eval = |q: &QTable, mu: &ProbabilityVector| -> mfql::Result<Option<LyapunovValue>> {
        if fixed.is_empty() {
            Ok(None)
        } else {
            lyapunov(q, mu, &fixed, spec, weight, &inner).map(Some)
        }
    };
    let (record, label) = match rc.mode {
        Mode::Engine => {
            let mut cfg = IterationConfig::new(rates, rc.iterations);
            cfg.record_every = rc.record_every.max(1);
            cfg.stop_on_tolerance = rc.stop_on_tolerance;
            cfg.tol_t = rc.tol;
            cfg.tol_p = rc.tol;
            let rec = run_observed(
                spec,
                spec.zero_q(),
                ProbabilityVector::uniform(spec.n_states()),
                &cfg,
                &mut |q, mu| eval(q, mu),
            )?;
            (rec, "engine")
        }
        Mode::Learner => {
            let mut cfg = EpisodeConfig::new(rates, rc.episodes, rc.steps_per_episode, ctx.seed);
            cfg.epsilon = rc.epsilon;
            cfg.env_mu = rc.env_mu;
            cfg.record_every = rc.record_every.max(1);
            let state = match &rc.resume {
                Some(p) => load_checkpoint(p, spec)?,
                None => init_learner(spec, &cfg),
            };
            let out = train_observed(spec, &cfg, state, &mut |s| eval(&s.q, s.terminal_mu()))?;
            save_checkpoint(&ctx.path("checkpoint.json"), &out.state, spec).map_err(io_err)?;
            (out.record, "learner")
        }
    };
    write_trajectory(&ctx.path("trajectory.csv"), &record).map_err(io_err)?;
    write(&ctx.path("q.csv"), &q_rows(label, &record.final_q, spec))?;
    write(&ctx.path("mu.csv"), &mu_rows(label, &record.final_q, &record.final_mu, spec))?;
    let last = record.steps.last().expect("at least one recorded step");
    println!(
        "{label}: {} updates, res_T {:.3e}, res_P {:.3e}{}",
        record.iterations,
        last.res_t_sup,
        last.res_p_tv,
        last.lyapunov.map(|l| format!(", Lyapunov {:.3e}", l.value)).unwrap_or_default()
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    job: usize,
    rho_mu: f64,
    rho_q: f64,
    ratio: f64,
    status: String,
    iterations: usize,
    res_t_sup: f64,
    res_p_tv: f64,
    q_gap_mfg: f64,
    mu_gap_mfg: f64,
    q_gap_mfc: f64,
    mu_gap_mfc: f64,
}

struct JobOutcome {
    q: QTable,
    mu: ProbabilityVector,
    iterations: usize,
    res_t: f64,
    res_p: f64,
}

fn sweep_job(ctx: &Context, job: usize, pair: [f64; 2]) -> Result<JobOutcome, CliError> {
    let sc = &ctx.cfg.sweep;
    let rates = rates(pair)?;
    let spec = &ctx.spec;
    let record = match sc.mode {
        Mode::Engine => {
            let mut cfg = IterationConfig::new(rates, sc.iterations);
            cfg.record_every = sc.record_every.max(1);
            run_observed(
                spec,
                spec.zero_q(),
                ProbabilityVector::uniform(spec.n_states()),
                &cfg,
                &mut |_, _| Ok(None),
            )?
        }
        Mode::Learner => {
            let mut cfg = EpisodeConfig::new(rates, sc.episodes, sc.steps_per_episode, ctx.seed.wrapping_add(job as u64));
            cfg.epsilon = sc.epsilon;
            cfg.env_mu = ctx.cfg.run.env_mu;
            cfg.record_every = sc.record_every.max(1);
            train_observed(spec, &cfg, init_learner(spec, &cfg), &mut |_| Ok(None))?.record
        }
    };
    write_trajectory(&ctx.path(&format!("sweep_{job}.csv")), &record).map_err(io_err)?;
    let last = record.steps.last().expect("at least one recorded step");
    Ok(JobOutcome {
        res_t: last.res_t_sup,
        res_p: last.res_p_tv,
        iterations: record.iterations,
        q: record.final_q,
        mu: record.final_mu,
    })
}

pub fn sweep(ctx: &Context) -> Result<(), CliError> {
    let pairs = &ctx.cfg.sweep.pairs;
    if pairs.is_empty() {
        return Err(CliError::Config("sweep.pairs is empty".into()));
    }
    let (game, control) = ctx.solve_oracles()?;
    let mut outcomes: Vec<Option<Result<JobOutcome, CliError>>> = (0..pairs.len()).map(|_| None).collect();
    // Jobs are independent and seeded by index, so the thread count does
    // not change any output.
    let chunk = pairs.len().div_ceil(ctx.workers);
    std::thread::scope(|s| {
        for (c, slots) in outcomes.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (i, slot) in slots.iter_mut().enumerate() {
                    let job = c * chunk + i;
                    *slot = Some(sweep_job(ctx, job, pairs[job]));
                }
            });
        }
    });
    let mut rows = Vec::new();
    let mut failed = 0;
    for (job, (pair, outcome)) in pairs.iter().zip(outcomes).enumerate() {
        let outcome = outcome.expect("every job ran");
        let mut row = SweepRow {
            job,
            rho_mu: pair[0],
            rho_q: pair[1],
            ratio: pair[1] / pair[0],
            status: "ok".into(),
            iterations: 0,
            res_t_sup: f64::NAN,
            res_p_tv: f64::NAN,
            q_gap_mfg: f64::NAN,
            mu_gap_mfg: f64::NAN,
            q_gap_mfc: f64::NAN,
            mu_gap_mfc: f64::NAN,
        };
        match outcome {
            Ok(o) => {
                row.iterations = o.iterations;
                row.res_t_sup = o.res_t;
                row.res_p_tv = o.res_p;
                row.q_gap_mfg = o.q.sup_distance(&game.q)?;
                row.mu_gap_mfg = tv_distance(&o.mu, &game.mu)?;
                row.q_gap_mfc = o.q.sup_distance(&control.q)?;
                row.mu_gap_mfc = tv_distance(&o.mu, &control.mu)?;
            }
            Err(e) => {
                log::error!("sweep job {job} ({pair:?}): {e}");
                row.status = format!("failed: {e}");
                failed += 1;
            }
        }
        rows.push(row);
    }
    write(&ctx.path("sweep.csv"), &rows)?;
    println!("sweep: {} jobs, {failed} failed", rows.len());
    if failed > 0 {
        return Err(CliError::PartialSweep { failed, total: rows.len() });
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleSummary<'a> {
    solver: &'a str,
    residual_t: f64,
    residual_p: f64,
    iterations: usize,
}

pub fn oracle(ctx: &Context) -> Result<(), CliError> {
    let (game, control) = ctx.solve_oracles()?;
    let spec = &ctx.spec;
    let mut q = q_rows("mfg", &game.q, spec);
    q.extend(q_rows("mfc", &control.q, spec));
    write(&ctx.path("oracle_q.csv"), &q)?;
    let mut mu = mu_rows("mfg", &game.q, &game.mu, spec);
    mu.extend(mu_rows("mfc", &control.q, &control.mu, spec));
    write(&ctx.path("oracle_mu.csv"), &mu)?;
    let summary: Vec<OracleSummary> = [("mfg", &game), ("mfc", &control)]
        .into_iter()
        .map(|(solver, fp)| OracleSummary {
            solver,
            residual_t: fp.residual_t,
            residual_p: fp.residual_p,
            iterations: fp.iterations,
        })
        .collect();
    write(&ctx.path("oracle_summary.csv"), &summary)?;
    println!(
        "oracle: |Q_mfg - Q_mfc| = {:.3e}, TV(mu_mfg, mu_mfc) = {:.3e}",
        game.q.sup_distance(&control.q)?,
        tv_distance(&game.mu, &control.mu)?
    );
    Ok(())
}

#[derive(Serialize)]
struct ConstantRow {
    name: &'static str,
    value: f64,
    provenance: &'static str,
}

#[derive(Serialize)]
struct TheoremRow {
    rho_mu: f64,
    rho_q: f64,
    ratio: f64,
    weight_lower: f64,
    weight_upper: f64,
    weight: f64,
    lambda_mu: f64,
    c1: f64,
    c2: f64,
    c: f64,
    floor: f64,
    valid: bool,
    rates_admissible: bool,
    note: String,
}

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::Exact => "exact",
        Provenance::LowerBound => "sampled_lower_bound",
        Provenance::Declared => "declared",
    }
}

fn random_q_tables(n: usize, spec: &ProblemSpec, scale: f64, seed: u64) -> Vec<QTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| spec.zero_q())
        .map(|mut q| {
            q.values_mut().iter_mut().for_each(|v| *v = scale * rng.random::<f64>());
            q
        })
        .collect()
}

pub fn diagnose(ctx: &Context) -> Result<(), CliError> {
    let dc = &ctx.cfg.diagnose;
    let spec = &ctx.spec;
    let probes = probe_distributions(spec.n_states(), dc.random_distributions, ctx.seed);
    let sup = f_sup(spec, &probes);
    let mut qs = vec![spec.zero_q()];
    match ctx.solve_oracles() {
        Ok((g, c)) => {
            qs.push(g.q);
            qs.push(c.q);
        }
        Err(e) => log::warn!("oracles unavailable for the probe set: {e}"),
    }
    qs.extend(random_q_tables(dc.random_q, spec, spec.q_bound(sup), ctx.seed));
    let inner = DampedOptions::default();
    let beta = estimate_beta_over(spec, &qs, &inner).unwrap_or(0.0);
    let lip = estimate_lipschitz(spec, &qs, &probes)?;
    let l_f = estimate_lf(spec, &probes)?;

    let d = &dc.declared;
    let pick = |declared: Option<f64>, sampled: f64| match declared {
        Some(v) => (v, Provenance::Declared),
        None => (sampled, Provenance::LowerBound),
    };
    let (beta, pb) = pick(d.beta, beta);
    let (l_p, pp) = if spec.kernel.depends_on_mu() {
        pick(d.l_p, lip.l_p)
    } else {
        (d.l_p.unwrap_or(0.0), if d.l_p.is_some() { Provenance::Declared } else { Provenance::Exact })
    };
    let (l_q, pq) = pick(d.l_q, lip.l_q);
    let (l_f, pf) = if spec.cost.depends_on_mu() {
        pick(d.l_f, l_f)
    } else {
        (d.l_f.unwrap_or(0.0), if d.l_f.is_some() { Provenance::Declared } else { Provenance::Exact })
    };
    let (sup, ps) = pick(d.f_sup, sup);
    let ac = AssumptionConstants {
        beta,
        l_p,
        l_q,
        l_f,
        f_sup: sup,
        provenance: ProvenanceFlags { beta: pb, l_p: pp, l_q: pq, l_f: pf, f_sup: ps },
    };
    let mut constants = vec![
        ConstantRow { name: "beta", value: beta, provenance: provenance_name(pb) },
        ConstantRow { name: "l_p", value: l_p, provenance: provenance_name(pp) },
        ConstantRow { name: "l_q", value: l_q, provenance: provenance_name(pq) },
        ConstantRow { name: "l_f", value: l_f, provenance: provenance_name(pf) },
        ConstantRow { name: "f_sup", value: sup, provenance: provenance_name(ps) },
        ConstantRow { name: "margin", value: ac.margin(), provenance: "derived" },
    ];
    if lip.greedy_discontinuity {
        log::warn!("greedy switches make the sampled L_Q unbounded; declare it to override");
    }
    let (gamma, h) = (spec.gamma, spec.h);
    match uniqueness_check(&ac, gamma, h, None) {
        Ok(u) => constants.push(ConstantRow { name: "uniqueness_factor", value: u.factor, provenance: "derived" }),
        Err(e) => log::warn!("{e}"),
    }
    write(&ctx.path("constants.csv"), &constants)?;

    let mut rows = Vec::new();
    for pair in &dc.pairs {
        let r = rates(*pair)?;
        let mut row = TheoremRow {
            rho_mu: r.rho_mu,
            rho_q: r.rho_q,
            ratio: r.ratio(),
            weight_lower: f64::NAN,
            weight_upper: f64::NAN,
            weight: f64::NAN,
            lambda_mu: f64::NAN,
            c1: f64::NAN,
            c2: f64::NAN,
            c: f64::NAN,
            floor: f64::NAN,
            valid: false,
            rates_admissible: false,
            note: String::new(),
        };
        match weight_bounds(&ac, r, gamma, h) {
            Ok((lo, hi)) => {
                row.weight_lower = lo;
                row.weight_upper = hi;
            }
            Err(e) => row.note = e.to_string(),
        }
        if row.note.is_empty() {
            match suggest_weight(&ac, r, gamma, h).and_then(|w| theorem_constants(&ac, r, gamma, h, w)) {
                Ok(tc) => {
                    row.weight = tc.weight;
                    row.lambda_mu = tc.lambda_mu;
                    row.c1 = tc.c1;
                    row.c2 = tc.c2;
                    row.c = tc.c;
                    row.floor = tc.floor;
                    row.valid = tc.valid;
                    row.rates_admissible = tc.rates_admissible;
                    if !ac.is_sound() {
                        row.note = "estimated constants: not a certificate".into();
                    }
                }
                Err(e) => row.note = e.to_string(),
            }
        }
        rows.push(row);
    }
    write(&ctx.path("theorem.csv"), &rows)?;
    println!(
        "diagnose: beta {beta:.4}, L_p {l_p:.4}, L_Q {l_q:.4e}, L_f {l_f:.4}, margin {:.4}",
        ac.margin()
    );
    Ok(())
}

#[derive(Serialize)]
struct ToySummary {
    q0: f64,
    mu0: f64,
    rho_mu: f64,
    rho_q: f64,
    status: &'static str,
    iterations: usize,
    q: f64,
    mu: f64,
    nearest: &'static str,
    distance: f64,
}

pub fn toy(ctx: &Context) -> Result<(), CliError> {
    let tc = &ctx.cfg.toy;
    let named = [("mfg", TOY_MFG_POINT), ("mfc", TOY_MFC_POINT), ("saddle", TOY_SADDLE)];
    let mut rows = Vec::new();
    for (i, init) in tc.initial.iter().enumerate() {
        for (j, pair) in tc.pairs.iter().enumerate() {
            let r = rates(*pair)?;
            let s0 = ToyState::new(init[0], init[1]);
            let mut row = ToySummary {
                q0: s0.q,
                mu0: s0.mu,
                rho_mu: r.rho_mu,
                rho_q: r.rho_q,
                status: "diverged",
                iterations: 0,
                q: f64::NAN,
                mu: f64::NAN,
                nearest: "none",
                distance: f64::NAN,
            };
            match toy_run(s0, r, tc.max_iters, tc.tol) {
                Ok(traj) => {
                    write_toy_trajectory(&ctx.path(&format!("toy_{i}_{j}.csv")), &traj).map_err(io_err)?;
                    let last = traj.last();
                    let (name, dist) = named
                        .iter()
                        .map(|(n, p)| (*n, last.distance(p)))
                        .fold(("none", f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                    row.status = if traj.converged { "converged" } else { "max_iters" };
                    row.iterations = traj.states.len() - 1;
                    row.q = last.q;
                    row.mu = last.mu;
                    row.nearest = name;
                    row.distance = dist;
                }
                Err(e) => log::warn!("toy run from {init:?} with {pair:?}: {e}"),
            }
            rows.push(row);
        }
    }
    write(&ctx.path("toy_summary.csv"), &rows)?;
    for r in &rows {
        println!(
            "toy ({}, {}) rates ({}, {}): {} -> {} at {:.2e}",
            r.q0, r.mu0, r.rho_mu, r.rho_q, r.status, r.nearest, r.distance
        );
    }
    Ok(())
}
