//! File-level pipeline behind the command-line tool: generate data, train
//! the three policies, evaluate them in closed loop and tabulate the
//! results. Every file written here carries the run's config hash.
//!
//! Timing data goes to separate files (`*.log.json`, `timings.json`, the
//! training curves) so the dataset, policies and reports stay
//! byte-identical across reruns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{
    evaluate, write_rows_csv, write_trajectory_csv, Controller, PolicySummary, Rejection, TimingStats, MPC_NAME,
};
use crate::config::{content_hash, RunConfig};
use crate::dataset::{generate_logged, with_workers, write_atomic, Dataset, GenerationStats};
use crate::error::{Error, Result};
use crate::plot::{phase_svg, Series};
use crate::policy::Normalization;
use crate::training::{certify_policy, problems_for, train, write_curve_csv, LossKind, PolicyFile, TrainingProvenance};

const SUMMARY_FORMAT: &str = "cgmpc-summary";
const SCHEMA_VERSION: u32 = 1;

/// File layout inside the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn generation_log(&self) -> PathBuf {
        self.root.join("gen_data.log.json")
    }

    pub fn policy(&self, kind: LossKind) -> PathBuf {
        self.root.join(format!("policy_{kind}.json"))
    }

    pub fn curve(&self, kind: LossKind) -> PathBuf {
        self.root.join(format!("curve_{kind}.csv"))
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }

    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories")
    }

    pub fn phase_plot(&self) -> PathBuf {
        self.root.join("phase.svg")
    }

    pub fn table(&self) -> PathBuf {
        self.root.join("table.md")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationLog {
    pub config_hash: String,
    #[serde(flatten)]
    pub stats: GenerationStats,
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn hash_line(cfg_hash: &str) -> String {
    format!("# config_hash {cfg_hash}\n")
}

/// Solves the OCP over the configured grid and writes the dataset and its
/// generation log. Nothing is written when generation fails.
pub fn gen_data(cfg: &RunConfig) -> Result<GenerationLog> {
    let spec = cfg.ocp_spec()?;
    let grid = cfg.grid_spec()?;
    let (mut dataset, stats) = generate_logged(&spec, &grid, &cfg.generation())?;
    dataset.provenance.config_hash = Some(cfg.hash());
    let layout = Layout::new(&cfg.out);
    dataset.save(&layout.dataset())?;
    let log = GenerationLog {
        config_hash: cfg.hash(),
        stats,
    };
    save_json(&layout.generation_log(), &log)?;
    log::info!(
        "dataset: kept {} of {}, gamma {:.4e}, {:.1} s",
        log.stats.n_kept,
        log.stats.n_attempted,
        log.stats.gamma,
        log.stats.wall_time_s
    );
    Ok(log)
}

/// Loads the dataset and refuses it when it was generated under other
/// OCP, grid, solver or reduction settings.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dataset = Dataset::load(&Layout::new(&cfg.out).dataset())?;
    cfg.check_dataset(&dataset)?;
    Ok(dataset)
}

/// Trains one policy per loss and writes the policy file, with its bound
/// certificate, and the training curve.
pub fn train_policies(cfg: &RunConfig, kinds: &[LossKind]) -> Result<Vec<PolicyFile>> {
    let spec = cfg.ocp_spec()?;
    let dataset = load_dataset(cfg)?;
    let problems = problems_for(&spec, &dataset)?;
    let norm = Normalization::from_boxes(&spec.x_lo, &spec.x_hi, &spec.u_lo, &spec.u_hi)?;
    let layout = Layout::new(&cfg.out);
    let mut files = Vec::new();
    for &kind in kinds {
        let tc = cfg.train_config(kind);
        let outcome = with_workers(cfg.workers, || train(&dataset, kind, &tc, &norm, &problems))??;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (cert, _) = with_workers(cfg.workers, || {
            certify_policy(
                &outcome.policy,
                &dataset,
                &problems,
                cfg.certificate.min_radius,
                cfg.certificate.pairs,
                &mut rng,
            )
        })??;
        if !cert.holds() {
            log::warn!("{kind}: bound certificate does not hold: {cert:?}");
        }
        let file = PolicyFile::new(
            outcome.policy.clone(),
            TrainingProvenance {
                loss: kind,
                seed: tc.seed,
                dataset_hash: dataset.digest(),
                spec_hash: content_hash(&spec),
                config_hash: cfg.hash(),
                reduction: dataset.provenance.reduction,
                train: tc,
                negative_forms: outcome.negative_forms,
            },
            Some(cert),
        );
        file.save(&layout.policy(kind))?;
        let mut curve = hash_line(&cfg.hash()).into_bytes();
        write_curve_csv(&mut curve, &outcome.curve)?;
        write_atomic(&layout.curve(kind), &curve)?;
        log::info!(
            "{kind}: loss {:.4e} -> {:.4e} in {:.1} s",
            outcome.initial_loss(),
            outcome.final_loss(),
            outcome.wall_time_s
        );
        files.push(file);
    }
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub format: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub scenarios: usize,
    pub steps: usize,
    pub delta: f64,
    /// Policy name to the digest of the file it was loaded from.
    pub policy_files: BTreeMap<String, String>,
    pub policies: BTreeMap<String, PolicySummary>,
    pub rejections: Vec<Rejection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingsFile {
    pub config_hash: String,
    pub per_step: BTreeMap<String, TimingStats>,
    /// Mean controller time relative to the mean MPC solve time.
    pub ratio_to_mpc: BTreeMap<String, f64>,
}

/// Policy files the evaluation uses when none are named: every trained
/// loss present in the output directory.
pub fn default_policy_paths(cfg: &RunConfig) -> Vec<PathBuf> {
    let layout = Layout::new(&cfg.out);
    LossKind::ALL.iter().map(|&k| layout.policy(k)).filter(|p| p.exists()).collect()
}

/// Closed-loop evaluation of MPC and the given policies on a common
/// scenario set.
pub fn evaluate_policies(cfg: &RunConfig, policy_paths: &[PathBuf]) -> Result<SummaryFile> {
    let spec = cfg.ocp_spec()?;
    let spec_hash = content_hash(&spec);
    let mut controllers = vec![Controller::Mpc { solver: cfg.solver.clone() }];
    let mut digests = BTreeMap::new();
    for path in policy_paths {
        let file = PolicyFile::load(path)?;
        if file.provenance.spec_hash != spec_hash {
            return Err(Error::HashMismatch(format!("{} was trained for a different OCP", path.display())));
        }
        let name = file.provenance.loss.to_string();
        if digests.contains_key(&name) {
            return Err(Error::Config(format!("two policies trained with the {name} loss")));
        }
        digests.insert(name.clone(), content_hash(&file));
        controllers.push(Controller::Approx { name, policy: file.policy });
    }
    let eval = evaluate(&spec, &controllers, &cfg.solver, &cfg.eval_config())?;
    let layout = Layout::new(&cfg.out);
    let hash = cfg.hash();

    let mut csv = hash_line(&hash).into_bytes();
    write_rows_csv(&mut csv, &eval.report.rows)?;
    write_atomic(&layout.report_csv(), &csv)?;

    let dir = layout.trajectories();
    for (name, runs) in &eval.rollouts {
        for (i, r) in runs.iter().enumerate() {
            let mut buf = hash_line(&hash).into_bytes();
            write_trajectory_csv(&mut buf, r)?;
            write_atomic(&dir.join(format!("s{i:02}_{name}.csv")), &buf)?;
        }
    }
    let series: Vec<Series> = eval
        .rollouts
        .iter()
        .map(|(name, runs)| Series {
            label: name,
            trajectories: runs.iter().map(|r| r.states.as_slice()).collect(),
        })
        .collect();
    write_atomic(&layout.phase_plot(), phase_svg(&spec, &series, &format!("config_hash {hash}")).as_bytes())?;

    let mpc_mean = eval.timings.get(MPC_NAME).map_or(f64::NAN, |t| t.mean_s);
    let timings = TimingsFile {
        config_hash: hash.clone(),
        ratio_to_mpc: eval.timings.iter().map(|(k, t)| (k.clone(), t.mean_s / mpc_mean)).collect(),
        per_step: eval.timings,
    };
    save_json(&layout.timings(), &timings)?;

    let summary = SummaryFile {
        format: SUMMARY_FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        config_hash: hash,
        scenarios: eval.report.scenarios.len(),
        steps: cfg.eval.steps,
        delta: eval.report.delta,
        policy_files: digests,
        policies: eval.report.summary,
        rejections: eval.report.rejections,
    };
    save_json(&layout.summary(), &summary)?;
    for (name, s) in &summary.policies {
        if s.below_delta > 0 {
            log::warn!("{name}: {} scenarios beat MPC by more than delta; worth a look", s.below_delta);
        }
    }
    Ok(summary)
}

fn load_summary(path: &Path) -> Result<SummaryFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let s: SummaryFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    if s.format != SUMMARY_FORMAT {
        return Err(Error::parse(path, "not a summary file"));
    }
    if s.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: s.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(s)
}

fn csv_hash(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash "))
        .map(str::to_string)
        .ok_or_else(|| Error::parse(path, "missing config hash line"))
}

/// Collects the run's outputs into a results table. Refuses when the files
/// were produced under different configurations.
pub fn report(out: &Path) -> Result<String> {
    let layout = Layout::new(out);
    let summary = load_summary(&layout.summary())?;
    let mut hashes: Vec<(PathBuf, String)> = vec![(layout.summary(), summary.config_hash.clone())];
    hashes.push((layout.report_csv(), csv_hash(&layout.report_csv())?));
    let timings: Option<TimingsFile> = match std::fs::read_to_string(layout.timings()) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| Error::parse(layout.timings(), e))?),
        Err(_) => None,
    };
    if let Some(t) = &timings {
        hashes.push((layout.timings(), t.config_hash.clone()));
    }
    let mut certificates = BTreeMap::new();
    for kind in LossKind::ALL {
        let name = kind.to_string();
        let Some(digest) = summary.policy_files.get(&name) else {
            continue;
        };
        let path = layout.policy(kind);
        let file = PolicyFile::load(&path)?;
        if &content_hash(&file) != digest {
            return Err(Error::HashMismatch(format!("{} changed after evaluation", path.display())));
        }
        hashes.push((path, file.provenance.config_hash.clone()));
        certificates.insert(name, file.certificate);
    }
    if layout.dataset().exists() {
        let d = Dataset::load(&layout.dataset())?;
        if let Some(h) = d.provenance.config_hash {
            hashes.push((layout.dataset(), h));
        }
    }
    if let Some((path, h)) = hashes.iter().find(|(_, h)| *h != summary.config_hash) {
        return Err(Error::HashMismatch(format!(
            "{} has config hash {h}, the summary has {}",
            path.display(),
            summary.config_hash
        )));
    }

    let mut t = String::new();
    let _ = writeln!(t, "<!-- config_hash {} -->", summary.config_hash);
    let _ = writeln!(
        t,
        "Closed-loop cost excess J - J* over {} scenarios of {} steps\n",
        summary.scenarios, summary.steps
    );
    let _ = writeln!(
        t,
        "| policy | mean J-J* | max J-J* | min J-J* | failed | clipped | violation steps | certificate |"
    );
    let _ = writeln!(t, "|---|---|---|---|---|---|---|---|");
    for (name, s) in &summary.policies {
        let cert = match certificates.get(name) {
            Some(Some(c)) if c.holds() => "holds",
            Some(Some(_)) => "FAILS",
            _ => "-",
        };
        let _ = writeln!(
            t,
            "| {name} | {:.4e} | {:.4e} | {:.4e} | {} | {} | {} | {cert} |",
            s.mean_excess, s.max_excess, s.min_excess, s.failures, s.clipped, s.violation_steps
        );
    }
    if !summary.rejections.is_empty() {
        let _ = writeln!(t, "\n{} initial states rejected as MPC-infeasible.", summary.rejections.len());
    }
    write_atomic(&layout.table(), t.as_bytes())?;

    if let Some(tf) = timings {
        let _ = writeln!(t, "\nMean controller time per step (not reproducible, from timings.json):\n");
        for (name, s) in &tf.per_step {
            let _ = writeln!(
                t,
                "  {name:>4}: {:.3e} s  ({:.3}x MPC)",
                s.mean_s,
                tf.ratio_to_mpc.get(name).copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(t)
}

/// gen-data, then train all three losses, evaluate and report.
pub fn run_all(cfg: &RunConfig) -> Result<String> {
    gen_data(cfg)?;
    train_policies(cfg, &LossKind::ALL)?;
    evaluate_policies(cfg, &default_policy_paths(cfg))?;
    report(&cfg.out)
}
