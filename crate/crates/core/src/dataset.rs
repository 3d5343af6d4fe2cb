//! Certified training data: sample the state box, solve the OCP at every
//! point, keep the successes with their multipliers and first-input
//! curvature, and persist the lot as JSON lines.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::error::{check_dim, Error, Result};
use crate::nlp::NlpProblem;
use crate::ocp::{build_nlp, OcpSpec, ShootingNlp};
use crate::sensitivity::{gamma, reduced_hessian, ReductionMode, SensitivityRecord};
use crate::solver::{certify, detect_active_set, kkt_residual, solve, KktPoint, SolveFlag, SolverConfig};

pub const SCHEMA_VERSION: u32 = 1;
const FORMAT: &str = "cgmpc-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub step: f64,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, step: f64) -> Result<Self> {
        let g = Self { lo, hi, step };
        g.validate()?;
        Ok(g)
    }

    /// Grid over the state box of `spec`.
    pub fn state_box(spec: &OcpSpec, step: f64) -> Result<Self> {
        Self::new(spec.x_lo.clone(), spec.x_hi.clone(), step)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("grid corner", self.lo.len(), self.hi.len())?;
        if self.lo.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one dimension".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid step must be positive, got {}", self.step)));
        }
        for (l, h) in self.lo.iter().zip(&self.hi) {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::InvalidArgument(format!("grid corners must satisfy lo <= hi, got [{l}, {h}]")));
            }
        }
        Ok(())
    }

    /// Points along one axis, both endpoints included. When the span is not
    /// a multiple of the step the upper endpoint closes a shorter last gap.
    pub fn axis(&self, d: usize) -> Vec<f64> {
        let (lo, hi) = (self.lo[d], self.hi[d]);
        let span = hi - lo;
        if span == 0.0 {
            return vec![lo];
        }
        let k = span / self.step;
        let whole = k.round();
        if (k - whole).abs() <= 1e-9 * k.max(1.0) {
            // spread the span exactly so the last point lands on hi
            let n = whole as usize;
            return (0..=n).map(|i| (lo + span * i as f64 / n as f64).min(hi)).collect();
        }
        let mut pts: Vec<f64> = (0..=k.floor() as usize).map(|i| lo + self.step * i as f64).collect();
        pts.push(hi);
        pts
    }

    pub fn len(&self) -> usize {
        (0..self.lo.len()).map(|d| self.axis(d).len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Full Cartesian grid in row-major order (last coordinate varies fastest).
pub fn grid_states(grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    Ok(grid_rows(grid)?.into_iter().flatten().collect())
}

/// The grid split into rows: consecutive points that differ only in the
/// last coordinate. Rows are the unit of warm-start chaining.
pub fn grid_rows(grid: &GridSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    grid.validate()?;
    let axes: Vec<Vec<f64>> = (0..grid.lo.len()).map(|d| grid.axis(d)).collect();
    let (last, outer) = axes.split_last().expect("validated non-empty");
    let mut prefixes: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in outer {
        prefixes = prefixes
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    Ok(prefixes
        .into_iter()
        .map(|p| {
            last.iter()
                .map(|v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
                .collect()
        })
        .collect())
}

/// `n` states drawn uniformly from the box `[lo, hi]`.
pub fn uniform_states(lo: &[f64], hi: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    check_dim("box corner", lo.len(), hi.len())?;
    if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::InvalidArgument("box corners must satisfy lo <= hi".into()));
    }
    Ok((0..n)
        .map(|_| lo.iter().zip(hi).map(|(l, h)| if l == h { *l } else { rng.gen_range(*l..*h) }).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub u_star: Vec<f64>,
    pub j_star: f64,
    /// Optimal inputs after the first.
    pub w_bar_star: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub sens: SensitivityRecord,
}

impl Sample {
    pub fn w_star(&self) -> Vec<f64> {
        let mut w = self.u_star.clone();
        w.extend_from_slice(&self.w_bar_star);
        w
    }

    pub fn problem<'a>(&self, spec: &'a OcpSpec) -> Result<ShootingNlp<'a>> {
        build_nlp(spec, &self.x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    Grid(GridSpec),
    Uniform { count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub solver: SolverConfig,
    pub reduction: ReductionMode,
    pub seed: u64,
    pub sampling: Sampling,
    /// Hash of the run configuration, when generated from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub gamma: f64,
    pub n_attempted: usize,
    pub n_kept: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub solver: SolverConfig,
    pub reduction: ReductionMode,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            reduction: ReductionMode::Direct,
            workers: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub n_attempted: usize,
    pub n_kept: usize,
    pub gamma: f64,
    /// Outcome counts keyed by solver flag, plus `rejected` for converged
    /// points that failed certification or the curvature step.
    pub outcomes: BTreeMap<String, usize>,
    /// Points where the warm start failed and the cold restart was used.
    pub cold_restarts: usize,
    pub solver_iterations: usize,
    pub wall_time_s: f64,
}

enum Outcome {
    Kept(Box<Sample>),
    Skipped(String),
}

struct PointResult {
    outcome: Outcome,
    cold_restart: bool,
    iterations: usize,
}

fn cold_start(spec: &OcpSpec, p: &[f64]) -> Vec<f64> {
    spec.lqr_plan(p).unwrap_or_else(|_| spec.equilibrium_plan())
}

fn flag_name(flag: SolveFlag) -> &'static str {
    match flag {
        SolveFlag::Succeeded => "succeeded",
        SolveFlag::Infeasible => "infeasible",
        SolveFlag::MaxIter => "max_iter",
        SolveFlag::NumericalFailure => "numerical_failure",
    }
}

/// Solves one parameter. A failed warm start is retried from the cold
/// LQR plan, since a neighbour's optimum can sit in a basin that the
/// unstable dynamics turn infeasible.
fn solve_point(spec: &OcpSpec, p: &[f64], guess: Option<&[f64]>, cfg: &GenerationConfig) -> (PointResult, Option<Vec<f64>>) {
    let nlp = match build_nlp(spec, p) {
        Ok(n) => n,
        Err(e) => {
            log::debug!("skipping {p:?}: {e}");
            let r = PointResult {
                outcome: Outcome::Skipped("invalid".into()),
                cold_restart: false,
                iterations: 0,
            };
            return (r, None);
        }
    };
    let mut iterations = 0;
    let mut cold_restart = false;
    let (mut kkt, mut status) = match guess {
        Some(g) => solve(&nlp, g, &cfg.solver),
        None => solve(&nlp, &cold_start(spec, p), &cfg.solver),
    };
    iterations += status.iterations;
    if !status.succeeded() && guess.is_some() {
        cold_restart = true;
        (kkt, status) = solve(&nlp, &cold_start(spec, p), &cfg.solver);
        iterations += status.iterations;
    }
    let done = |outcome| PointResult {
        outcome,
        cold_restart,
        iterations,
    };
    if !status.succeeded() {
        log::debug!("{p:?}: {:?} after {} iterations ({})", status.flag, status.iterations, status.message);
        return (done(Outcome::Skipped(flag_name(status.flag).into())), None);
    }
    // converged inputs can sit a rounding error outside U; store them inside
    for (k, v) in kkt.w_star.iter_mut().enumerate() {
        let j = k % spec.n_u();
        *v = v.clamp(spec.u_lo[j], spec.u_hi[j]);
    }
    let sample = certify(&nlp, &kkt, &cfg.solver)
        .and_then(|ok| if ok { Ok(()) } else { Err(Error::Numerical("certificate failed".into())) })
        .and_then(|_| reduced_hessian(&nlp, &kkt, spec.n_u(), cfg.reduction, &cfg.solver))
        .map(|sens| sample_from(p, &kkt, spec.n_u(), sens));
    match sample {
        Ok(s) => (done(Outcome::Kept(Box::new(s))), Some(kkt.w_star)),
        Err(e) => {
            log::warn!("{p:?}: converged but rejected: {e}");
            (done(Outcome::Skipped("rejected".into())), Some(kkt.w_star))
        }
    }
}

fn sample_from(p: &[f64], kkt: &KktPoint, n_u: usize, sens: SensitivityRecord) -> Sample {
    Sample {
        x: p.to_vec(),
        u_star: kkt.w_star[..n_u].to_vec(),
        j_star: kkt.j_star,
        w_bar_star: kkt.w_star[n_u..].to_vec(),
        lambda: kkt.lambda.clone(),
        mu: kkt.mu.clone(),
        sens,
    }
}

fn solve_row(spec: &OcpSpec, row: &[Vec<f64>], cfg: &GenerationConfig) -> Vec<PointResult> {
    let mut guess: Option<Vec<f64>> = None;
    row.iter()
        .map(|p| {
            let (r, next) = solve_point(spec, p, guess.as_deref(), cfg);
            guess = next;
            r
        })
        .collect()
}

pub(crate) fn with_workers<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// Solves the OCP at every grid point.
pub fn generate(spec: &OcpSpec, grid: &GridSpec, cfg: &GenerationConfig) -> Result<Dataset> {
    generate_logged(spec, grid, cfg).map(|(d, _)| d)
}

pub fn generate_logged(spec: &OcpSpec, grid: &GridSpec, cfg: &GenerationConfig) -> Result<(Dataset, GenerationStats)> {
    let rows = grid_rows(grid)?;
    generate_rows(spec, &rows, Sampling::Grid(grid.clone()), cfg)
}

/// Solves the OCP at `states`, each started cold.
pub fn generate_at(spec: &OcpSpec, states: &[Vec<f64>], cfg: &GenerationConfig) -> Result<(Dataset, GenerationStats)> {
    let rows: Vec<Vec<Vec<f64>>> = states.iter().map(|s| vec![s.clone()]).collect();
    generate_rows(spec, &rows, Sampling::Uniform { count: states.len() }, cfg)
}

fn generate_rows(
    spec: &OcpSpec,
    rows: &[Vec<Vec<f64>>],
    sampling: Sampling,
    cfg: &GenerationConfig,
) -> Result<(Dataset, GenerationStats)> {
    spec.validate()?;
    let start = Instant::now();
    // rows are independent chains, so the result does not depend on how
    // they are scheduled
    let results: Vec<Vec<PointResult>> =
        with_workers(cfg.workers, || rows.par_iter().map(|row| solve_row(spec, row, cfg)).collect())?;

    let mut stats = GenerationStats::default();
    let mut samples = Vec::new();
    for r in results.into_iter().flatten() {
        stats.n_attempted += 1;
        stats.solver_iterations += r.iterations;
        stats.cold_restarts += usize::from(r.cold_restart);
        let key = match r.outcome {
            Outcome::Kept(s) => {
                samples.push(*s);
                "succeeded".to_string()
            }
            Outcome::Skipped(k) => k,
        };
        *stats.outcomes.entry(key).or_default() += 1;
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset {
            attempted: stats.n_attempted,
        });
    }
    let records: Vec<SensitivityRecord> = samples.iter().map(|s| s.sens.clone()).collect();
    let g = gamma(&records)?;
    stats.n_kept = samples.len();
    stats.gamma = g;
    stats.wall_time_s = start.elapsed().as_secs_f64();
    let dataset = Dataset {
        n_kept: samples.len(),
        samples,
        gamma: g,
        n_attempted: stats.n_attempted,
        provenance: Provenance {
            spec_hash: content_hash(spec),
            solver: cfg.solver.clone(),
            reduction: cfg.reduction,
            seed: cfg.seed,
            sampling,
            config_hash: None,
        },
    };
    Ok((dataset, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub max_kkt_residual: f64,
    pub max_violation: f64,
    /// Samples whose stored active set differs from the one detected from
    /// the stored multipliers.
    pub active_set_mismatches: Vec<usize>,
}

impl Verification {
    pub fn passes(&self, cfg: &SolverConfig) -> bool {
        self.max_kkt_residual <= cfg.tol_kkt && self.max_violation <= cfg.tol_feas && self.active_set_mismatches.is_empty()
    }
}

impl Dataset {
    /// Recomputes γ and the counters from the samples.
    pub fn check_invariants(&self) -> Result<()> {
        if self.n_kept != self.samples.len() || self.n_kept > self.n_attempted {
            return Err(Error::InvalidArgument(format!(
                "inconsistent counts: n_kept {}, samples {}, n_attempted {}",
                self.n_kept,
                self.samples.len(),
                self.n_attempted
            )));
        }
        let records: Vec<SensitivityRecord> = self.samples.iter().map(|s| s.sens.clone()).collect();
        let g = gamma(&records)?;
        if g != self.gamma {
            return Err(Error::InvalidArgument(format!("stored gamma {} differs from recomputed {g}", self.gamma)));
        }
        Ok(())
    }

    /// Re-checks every stored KKT certificate against the OCP.
    pub fn verify(&self, spec: &OcpSpec) -> Result<Verification> {
        let cfg = &self.provenance.solver;
        let per_sample: Vec<(f64, f64, bool)> = self
            .samples
            .par_iter()
            .map(|s| -> Result<(f64, f64, bool)> {
                let nlp = s.problem(spec)?;
                let w = s.w_star();
                let kkt = kkt_residual(&nlp, &w, &s.lambda, &s.mu, cfg)?;
                let (_, c, g) = nlp.values(&w)?;
                let viol = c.iter().map(|v| v.abs()).chain(g.iter().map(|v| v.max(0.0))).fold(0.0, f64::max);
                let same = detect_active_set(&g, &s.mu, cfg).indices == s.sens.active_set;
                Ok((kkt, viol, same))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| e.at_sample(i)))
            .collect::<Result<_>>()?;
        Ok(Verification {
            max_kkt_residual: per_sample.iter().map(|r| r.0).fold(0.0, f64::max),
            max_violation: per_sample.iter().map(|r| r.1).fold(0.0, f64::max),
            active_set_mismatches: per_sample.iter().enumerate().filter(|(_, r)| !r.2).map(|(i, _)| i).collect(),
        })
    }

    /// Hash of the serialized dataset.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            gamma: fmt_f64(self.gamma),
            n_attempted: self.n_attempted,
            n_kept: self.n_kept,
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(&SampleLine::from(s)).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a dataset; `origin` names the source in error messages.
    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::parse(origin, "empty file"))?;
        let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| Error::parse(origin, format!("header: {e}")))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(Error::parse(origin, "not a dataset file"));
        }
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: origin.to_path_buf(),
                found,
                expected: SCHEMA_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| Error::parse(origin, format!("header: {e}")))?;
        let mut samples = Vec::with_capacity(header.n_kept);
        for (n, line) in lines {
            let wire: SampleLine =
                serde_json::from_str(line).map_err(|e| Error::parse(origin, format!("line {}: {e}", n + 1)))?;
            samples.push(wire.into_sample().map_err(|e| Error::parse(origin, format!("line {}: {e}", n + 1)))?);
        }
        if samples.len() != header.n_kept {
            return Err(Error::parse(
                origin,
                format!("truncated or padded: header promises {} samples, found {}", header.n_kept, samples.len()),
            ));
        }
        if !text.ends_with('\n') {
            return Err(Error::parse(origin, "truncated: missing final newline"));
        }
        let dataset = Dataset {
            samples,
            gamma: parse_f64(&header.gamma).map_err(|e| Error::parse(origin, e))?,
            n_attempted: header.n_attempted,
            n_kept: header.n_kept,
            provenance: header.provenance,
        };
        dataset.check_invariants().map_err(|e| Error::parse(origin, e))?;
        Ok(dataset)
    }

    /// Writes through a temporary file so a failed write leaves no partial
    /// dataset behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Shortest decimal form that parses back to the same bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

pub(crate) fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("bad float {s:?}: {e}"))
}

fn fmt_vec(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| fmt_f64(*x)).collect()
}

fn parse_vec(v: &[String]) -> std::result::Result<Vec<f64>, String> {
    v.iter().map(|s| parse_f64(s)).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    schema_version: u32,
    gamma: String,
    n_attempted: usize,
    n_kept: usize,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    x: Vec<String>,
    u_star: Vec<String>,
    j_star: String,
    w_bar_star: Vec<String>,
    lambda: Vec<String>,
    mu: Vec<String>,
    l_uu: Vec<String>,
    n_u: usize,
    active_set: Vec<usize>,
    hessian_norm: String,
    mode: ReductionMode,
}

impl From<&Sample> for SampleLine {
    fn from(s: &Sample) -> Self {
        Self {
            x: fmt_vec(&s.x),
            u_star: fmt_vec(&s.u_star),
            j_star: fmt_f64(s.j_star),
            w_bar_star: fmt_vec(&s.w_bar_star),
            lambda: fmt_vec(&s.lambda),
            mu: fmt_vec(&s.mu),
            l_uu: fmt_vec(&s.sens.l_uu),
            n_u: s.sens.n_u,
            active_set: s.sens.active_set.clone(),
            hessian_norm: fmt_f64(s.sens.hessian_norm),
            mode: s.sens.mode,
        }
    }
}

impl SampleLine {
    fn into_sample(self) -> std::result::Result<Sample, String> {
        let l_uu = parse_vec(&self.l_uu)?;
        if l_uu.len() != self.n_u * self.n_u || self.u_star.len() != self.n_u {
            return Err(format!("curvature block does not match n_u = {}", self.n_u));
        }
        Ok(Sample {
            x: parse_vec(&self.x)?,
            u_star: parse_vec(&self.u_star)?,
            j_star: parse_f64(&self.j_star)?,
            w_bar_star: parse_vec(&self.w_bar_star)?,
            lambda: parse_vec(&self.lambda)?,
            mu: parse_vec(&self.mu)?,
            sens: SensitivityRecord {
                l_uu,
                n_u: self.n_u,
                active_set: self.active_set,
                hessian_norm: parse_f64(&self.hessian_norm)?,
                mode: self.mode,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset() -> Dataset {
        let spec = OcpSpec::cstr_benchmark();
        let sample = |x: Vec<f64>, h: f64| Sample {
            x,
            u_star: vec![0.1 + 0.2],
            j_star: 1.0 / 3.0,
            w_bar_star: vec![std::f64::consts::PI, 1e-300, -0.0],
            lambda: vec![],
            mu: vec![0.0, 5e-324, 2.0],
            sens: SensitivityRecord {
                l_uu: vec![h],
                n_u: 1,
                active_set: vec![2],
                hessian_norm: h,
                mode: ReductionMode::Ift,
            },
        };
        Dataset {
            samples: vec![sample(vec![0.1, 0.5], 0.7), sample(vec![0.2, 0.6], 1.9)],
            gamma: 1.9,
            n_attempted: 3,
            n_kept: 2,
            provenance: Provenance {
                spec_hash: content_hash(&spec),
                solver: SolverConfig::default(),
                reduction: ReductionMode::Ift,
                seed: 7,
                sampling: Sampling::Uniform { count: 3 },
                config_hash: Some("c".into()),
            },
        }
    }

    #[test]
    fn cstr_grid_has_441_points() {
        let spec = OcpSpec::cstr_benchmark();
        let g = GridSpec::state_box(&spec, 0.02).unwrap();
        let pts = grid_states(&g).unwrap();
        assert_eq!(pts.len(), 441);
        assert_eq!(pts[0], vec![0.0632, 0.4519]);
        assert_eq!(pts[440], vec![0.4632, 0.8519]);
        // last coordinate fastest
        assert_eq!(pts[1][0], 0.0632);
        assert!(pts.iter().all(|p| spec.contains_state(p)));
    }

    #[test]
    fn one_dimensional_and_degenerate_grids() {
        let g = GridSpec::new(vec![0.0], vec![1.0], 0.5).unwrap();
        assert_eq!(grid_states(&g).unwrap(), vec![vec![0.0], vec![0.5], vec![1.0]]);
        let g = GridSpec::new(vec![0.3, 0.3], vec![0.3, 0.3], 0.1).unwrap();
        assert_eq!(grid_states(&g).unwrap(), vec![vec![0.3, 0.3]]);
        let g = GridSpec::new(vec![0.0], vec![1.0], 0.4).unwrap();
        assert_eq!(grid_states(&g).unwrap().len(), 4);
        assert!(GridSpec::new(vec![1.0], vec![0.0], 0.1).is_err());
        assert!(GridSpec::new(vec![0.0], vec![1.0], 0.0).is_err());
    }

    #[test]
    fn coarse_smoke_grid_size() {
        let spec = OcpSpec::cstr_benchmark();
        assert_eq!(GridSpec::state_box(&spec, 0.05).unwrap().len(), 81);
    }

    #[test]
    fn round_trip_is_exact() {
        let d = small_dataset();
        let text = d.to_jsonl();
        let back = Dataset::from_jsonl(&text, Path::new("mem")).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.samples[0].w_bar_star[2].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/data.jsonl");
        let d = small_dataset();
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let text = small_dataset().to_jsonl().replacen("\"schema_version\":1", "\"schema_version\":99", 1);
        match Dataset::from_jsonl(&text, Path::new("mem")) {
            Err(Error::SchemaVersion { found: 99, expected: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_files_are_rejected() {
        let text = small_dataset().to_jsonl();
        let cut_line = &text[..text.trim_end().rfind('\n').unwrap() + 1];
        assert!(matches!(Dataset::from_jsonl(cut_line, Path::new("mem")), Err(Error::Parse { .. })));
        let cut_mid = &text[..text.len() - 10];
        assert!(matches!(Dataset::from_jsonl(cut_mid, Path::new("mem")), Err(Error::Parse { .. })));
        assert!(matches!(Dataset::from_jsonl("", Path::new("mem")), Err(Error::Parse { .. })));
    }

    #[test]
    fn tampered_gamma_is_rejected() {
        let mut d = small_dataset();
        d.gamma = 2.0;
        assert!(Dataset::from_jsonl(&d.to_jsonl(), Path::new("mem")).is_err());
    }

    #[test]
    fn zero_iterations_keep_nothing() {
        let spec = OcpSpec::cstr_benchmark();
        let cfg = GenerationConfig {
            solver: SolverConfig {
                max_iter: 0,
                ..Default::default()
            },
            workers: 1,
            ..Default::default()
        };
        let grid = GridSpec::new(vec![0.2, 0.6], vec![0.25, 0.65], 0.05).unwrap();
        assert!(matches!(generate(&spec, &grid, &cfg), Err(Error::EmptyDataset { attempted: 4 })));
    }

    #[test]
    fn setpoint_replicas_give_the_equilibrium_input() {
        let spec = OcpSpec {
            horizon: 20,
            ..OcpSpec::cstr_benchmark()
        };
        let states = vec![spec.x_sp.clone(); 3];
        let cfg = GenerationConfig {
            workers: 1,
            ..Default::default()
        };
        let (d, stats) = generate_at(&spec, &states, &cfg).unwrap();
        assert_eq!((d.n_attempted, d.n_kept, stats.cold_restarts), (3, 3, 0));
        for s in &d.samples {
            assert!((s.u_star[0] - spec.u_e[0]).abs() < 1e-6, "{}", s.u_star[0]);
            assert!(s.j_star < 1e-10);
        }
        let v = d.verify(&spec).unwrap();
        assert!(v.passes(&d.provenance.solver), "{v:?}");
    }

    #[test]
    fn generation_ignores_worker_count() {
        let spec = OcpSpec {
            horizon: 20,
            ..OcpSpec::cstr_benchmark()
        };
        let grid = GridSpec::new(vec![0.2, 0.6], vec![0.3, 0.7], 0.05).unwrap();
        let one = generate(&spec, &grid, &GenerationConfig { workers: 1, ..Default::default() }).unwrap();
        let two = generate(&spec, &grid, &GenerationConfig { workers: 2, ..Default::default() }).unwrap();
        assert_eq!(one.to_jsonl(), two.to_jsonl());
    }
}
