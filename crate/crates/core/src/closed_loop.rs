//! Closed-loop comparison of MPC against approximate policies on a common
//! set of random initial states.
//!
//! The baseline cost `J*` of a scenario is the cost MPC actually realizes
//! in closed loop, so `J − J*` measures what an approximation loses against
//! the controller it imitates.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::with_workers;
use crate::dynamics::step;
use crate::error::{Error, Result};
use crate::ocp::{build_nlp, OcpSpec};
use crate::policy::MlpPolicy;
use crate::solver::{solve, SolverConfig};

/// States outside the box by at most this much are projected back before
/// an MPC solve; they are solver-tolerance artifacts, not real violations.
const PROJECTION_TOL: f64 = 1e-7;

/// Excess costs below `-DELTA` are flagged for investigation.
pub const DELTA: f64 = 5e-4;

pub const MPC_NAME: &str = "mpc";

#[derive(Clone, Debug)]
pub enum Controller {
    Mpc { solver: SolverConfig },
    Approx { name: String, policy: MlpPolicy },
}

impl Controller {
    pub fn name(&self) -> &str {
        match self {
            Controller::Mpc { .. } => MPC_NAME,
            Controller::Approx { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub x0: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// `x(0), …, x(T)`; shorter when the run failed.
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    pub cost: f64,
    pub clipped: usize,
    /// Steps whose state left the box, and the deepest excursion.
    pub violation_steps: usize,
    pub max_violation: f64,
    pub failure: Option<String>,
    /// Controller wall time per step in seconds. Not part of any
    /// reproducible artifact.
    #[serde(skip)]
    pub step_times: Vec<f64>,
}

/// Runs `controller` on the plant for `scenario.steps` periods.
pub fn simulate(controller: &Controller, scenario: &Scenario, spec: &OcpSpec) -> Rollout {
    let mut out = Rollout {
        states: vec![scenario.x0.clone()],
        inputs: Vec::new(),
        stage_costs: Vec::new(),
        cost: 0.0,
        clipped: 0,
        violation_steps: 0,
        max_violation: 0.0,
        failure: None,
        step_times: Vec::new(),
    };
    let mut x = scenario.x0.clone();
    let mut plan: Option<Vec<f64>> = None;
    for t in 0..scenario.steps {
        let depth = spec.state_violation(&x);
        if depth > 0.0 {
            out.violation_steps += 1;
            out.max_violation = out.max_violation.max(depth);
        }
        let start = Instant::now();
        let u = match controller {
            Controller::Approx { policy, .. } => {
                let mut u = policy.forward(&x);
                out.clipped += usize::from(spec.clip_input(&mut u));
                Ok(u)
            }
            Controller::Mpc { solver } => mpc_input(spec, solver, &x, &mut plan),
        };
        out.step_times.push(start.elapsed().as_secs_f64());
        let u = match u {
            Ok(u) => u,
            Err(e) => {
                out.failure = Some(format!("step {t}: {e}"));
                return out;
            }
        };
        let l = spec.stage_cost(&x, &u);
        match step(&spec.model, &x, &u, &spec.integrator) {
            Ok(next) => x = next,
            Err(e) => {
                out.failure = Some(format!("step {t}: plant {e}"));
                return out;
            }
        }
        out.stage_costs.push(l);
        out.cost += l;
        out.inputs.push(u);
        out.states.push(x.clone());
    }
    out
}

/// First input of the MPC plan at `x`, warm-started from the shifted
/// previous plan and retried cold if that fails.
fn mpc_input(spec: &OcpSpec, cfg: &SolverConfig, x: &[f64], plan: &mut Option<Vec<f64>>) -> Result<Vec<f64>> {
    let depth = spec.state_violation(x);
    if depth > PROJECTION_TOL {
        return Err(Error::Numerical(format!("state {x:?} left the box by {depth:.3e}")));
    }
    let p: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| v.clamp(spec.x_lo[i], spec.x_hi[i]))
        .collect();
    let nlp = build_nlp(spec, &p)?;
    let mut result = None;
    if let Some(prev) = plan.as_ref() {
        let (kkt, status) = solve(&nlp, &spec.shift_plan(prev), cfg);
        if status.succeeded() {
            result = Some(kkt);
        }
    }
    if result.is_none() {
        let cold = spec.lqr_plan(&p).unwrap_or_else(|_| spec.equilibrium_plan());
        let (kkt, status) = solve(&nlp, &cold, cfg);
        if !status.succeeded() {
            *plan = None;
            return Err(Error::Numerical(format!("MPC solve {:?}: {}", status.flag, status.message)));
        }
        result = Some(kkt);
    }
    let kkt = result.expect("set above");
    let u = kkt.w_star[..spec.n_u()].to_vec();
    *plan = Some(kkt.w_star);
    Ok(u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scenarios: usize,
    pub steps: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Upper bound on initial states drawn while looking for feasible ones.
    pub max_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenarios: 35,
            steps: 100,
            seed: 2024,
            workers: 0,
            max_draws: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub draw: usize,
    pub x0: Vec<f64>,
    pub reason: String,
}

/// MPC closed-loop runs on the accepted scenarios.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub scenarios: Vec<Scenario>,
    pub rollouts: Vec<Rollout>,
    pub rejections: Vec<Rejection>,
    pub solver: SolverConfig,
}

/// Draws initial states uniformly from the state box and keeps the first
/// `cfg.scenarios` on which closed-loop MPC runs to the end. Candidates are
/// judged in draw order, so the set does not depend on the worker count.
pub fn run_baseline(spec: &OcpSpec, solver: &SolverConfig, cfg: &EvalConfig) -> Result<Baseline> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mpc = Controller::Mpc { solver: solver.clone() };
    let mut out = Baseline {
        scenarios: Vec::new(),
        rollouts: Vec::new(),
        rejections: Vec::new(),
        solver: solver.clone(),
    };
    let mut drawn = 0;
    while out.scenarios.len() < cfg.scenarios {
        let need = cfg.scenarios - out.scenarios.len();
        let batch = need.min(cfg.max_draws.saturating_sub(drawn));
        if batch == 0 {
            return Err(Error::Numerical(format!(
                "only {} of {} scenarios were MPC-feasible after {drawn} draws",
                out.scenarios.len(),
                cfg.scenarios
            )));
        }
        let candidates: Vec<Scenario> = (0..batch)
            .map(|_| Scenario {
                x0: (0..spec.n_x()).map(|i| rng.gen_range(spec.x_lo[i]..spec.x_hi[i])).collect(),
                steps: cfg.steps,
            })
            .collect();
        let runs: Vec<Rollout> = with_workers(cfg.workers, || candidates.par_iter().map(|s| simulate(&mpc, s, spec)).collect())?;
        for (k, (s, r)) in candidates.into_iter().zip(runs).enumerate() {
            match &r.failure {
                None => {
                    out.scenarios.push(s);
                    out.rollouts.push(r);
                }
                Some(reason) => out.rejections.push(Rejection {
                    draw: drawn + k,
                    x0: s.x0,
                    reason: reason.clone(),
                }),
            }
        }
        drawn += batch;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: usize,
    pub policy: String,
    pub x0_1: f64,
    pub x0_2: f64,
    pub cost: f64,
    pub baseline_cost: f64,
    /// `J − J*`; empty when the policy's run failed.
    pub excess: Option<f64>,
    pub clipped: usize,
    pub violation_steps: usize,
    pub max_violation: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub scenarios: usize,
    pub failures: usize,
    pub mean_excess: f64,
    pub max_excess: f64,
    pub min_excess: f64,
    /// Scenarios with `J − J* < −δ`.
    pub below_delta: usize,
    pub clipped: usize,
    pub violation_steps: usize,
    pub max_violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenarios: Vec<Scenario>,
    pub rows: Vec<ScenarioRow>,
    pub summary: BTreeMap<String, PolicySummary>,
    pub rejections: Vec<Rejection>,
    pub delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_s: f64,
    pub max_s: f64,
    pub steps: usize,
}

impl TimingStats {
    fn from_rollouts<'a>(runs: impl IntoIterator<Item = &'a Rollout>) -> Self {
        let times: Vec<f64> = runs.into_iter().flat_map(|r| r.step_times.iter().copied()).collect();
        if times.is_empty() {
            return Self::default();
        }
        Self {
            mean_s: times.iter().sum::<f64>() / times.len() as f64,
            max_s: times.iter().copied().fold(0.0, f64::max),
            steps: times.len(),
        }
    }
}

/// Per-controller trajectories, kept for plotting and trajectory CSVs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub timings: BTreeMap<String, TimingStats>,
    pub rollouts: BTreeMap<String, Vec<Rollout>>,
}

/// Runs each approximate controller on the baseline scenarios.
pub fn evaluate_against(baseline: &Baseline, controllers: &[Controller], spec: &OcpSpec, workers: usize) -> Result<Evaluation> {
    let mut rollouts: BTreeMap<String, Vec<Rollout>> = BTreeMap::new();
    rollouts.insert(MPC_NAME.into(), baseline.rollouts.clone());
    for c in controllers {
        if let Controller::Mpc { solver } = c {
            if *solver != baseline.solver {
                return Err(Error::Config("MPC controller differs from the baseline solver".into()));
            }
            continue;
        }
        if rollouts.contains_key(c.name()) {
            return Err(Error::Config(format!("duplicate controller name {:?}", c.name())));
        }
        let runs = with_workers(workers, || baseline.scenarios.par_iter().map(|s| simulate(c, s, spec)).collect())?;
        rollouts.insert(c.name().to_string(), runs);
    }
    let mut rows = Vec::new();
    for (name, runs) in &rollouts {
        for (i, (r, b)) in runs.iter().zip(&baseline.rollouts).enumerate() {
            let x0 = &baseline.scenarios[i].x0;
            rows.push(ScenarioRow {
                scenario: i,
                policy: name.clone(),
                x0_1: x0[0],
                x0_2: x0.get(1).copied().unwrap_or(f64::NAN),
                cost: r.cost,
                baseline_cost: b.cost,
                excess: r.failure.is_none().then(|| r.cost - b.cost),
                clipped: r.clipped,
                violation_steps: r.violation_steps,
                max_violation: r.max_violation,
                failure: r.failure.clone(),
            });
        }
    }
    let summary = summarize(&rows);
    let timings = rollouts.iter().map(|(k, v)| (k.clone(), TimingStats::from_rollouts(v))).collect();
    Ok(Evaluation {
        report: EvalReport {
            scenarios: baseline.scenarios.clone(),
            rows,
            summary,
            rejections: baseline.rejections.clone(),
            delta: DELTA,
        },
        timings,
        rollouts,
    })
}

/// Baseline plus every approximate controller.
pub fn evaluate(spec: &OcpSpec, controllers: &[Controller], solver: &SolverConfig, cfg: &EvalConfig) -> Result<Evaluation> {
    let baseline = run_baseline(spec, solver, cfg)?;
    evaluate_against(&baseline, controllers, spec, cfg.workers)
}

/// Aggregates per policy from the scenario rows.
pub fn summarize(rows: &[ScenarioRow]) -> BTreeMap<String, PolicySummary> {
    let mut out: BTreeMap<String, PolicySummary> = BTreeMap::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let s = out.entry(r.policy.clone()).or_insert(PolicySummary {
            scenarios: 0,
            failures: 0,
            mean_excess: f64::NAN,
            max_excess: f64::NEG_INFINITY,
            min_excess: f64::INFINITY,
            below_delta: 0,
            clipped: 0,
            violation_steps: 0,
            max_violation: 0.0,
        });
        s.scenarios += 1;
        s.clipped += r.clipped;
        s.violation_steps += r.violation_steps;
        s.max_violation = s.max_violation.max(r.max_violation);
        match r.excess {
            Some(e) => {
                s.max_excess = s.max_excess.max(e);
                s.min_excess = s.min_excess.min(e);
                s.below_delta += usize::from(e < -DELTA);
                let acc = sums.entry(r.policy.clone()).or_insert((0.0, 0));
                acc.0 += e;
                acc.1 += 1;
            }
            None => s.failures += 1,
        }
    }
    for (name, (sum, n)) in sums {
        if let Some(s) = out.get_mut(&name) {
            s.mean_excess = sum / n as f64;
        }
    }
    out
}

pub fn write_rows_csv(out: impl std::io::Write, rows: &[ScenarioRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numerical(format!("report CSV: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("report CSV", e))
}

/// One row per step: `t, x1, x2, u, stage_cost`.
pub fn write_trajectory_csv(mut out: impl std::io::Write, rollout: &Rollout) -> Result<()> {
    let io = |e| Error::io("trajectory CSV", e);
    let n_x = rollout.states.first().map_or(0, |s| s.len());
    let n_u = rollout.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n_x).map(|i| format!("x{i}")));
    header.extend((1..=n_u).map(|j| format!("u{j}")));
    header.push("stage_cost".into());
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (t, x) in rollout.states.iter().enumerate() {
        let mut cells: Vec<String> = vec![t.to_string()];
        cells.extend(x.iter().map(|v| format!("{v:e}")));
        match (rollout.inputs.get(t), rollout.stage_costs.get(t)) {
            (Some(u), Some(l)) => {
                cells.extend(u.iter().map(|v| format!("{v:e}")));
                cells.push(format!("{l:e}"));
            }
            _ => cells.extend(std::iter::repeat_n(String::new(), n_u + 1)),
        }
        writeln!(out, "{}", cells.join(",")).map_err(io)?;
    }
    Ok(())
}
