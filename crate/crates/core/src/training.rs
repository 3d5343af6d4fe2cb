//! Fitting the policy network under the three losses, and the certificate
//! tying them together.
//!
//! With `Δπ_i = π(x_i; θ) − u_i*`:
//!
//! ```text
//! L_mse = mean ‖Δπ_i‖²
//! L_w   = mean |Δπ_iᵀ L_uu(p_i) Δπ_i| / γ
//! L_lag = mean ΔL_i(π(x_i; θ))²
//! ```

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::nlp::NlpProblem;
use crate::ocp::{OcpSpec, ShootingNlp};
use crate::policy::{InitScheme, MlpPolicy, Normalization};
use crate::sensitivity::{estimate_bounds, BoundEstimate, ReductionMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "lag")]
    Lag,
    #[serde(rename = "w")]
    CostGuided,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::Lag, LossKind::CostGuided];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Lag => "lag",
            LossKind::CostGuided => "w",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "lag" => Ok(LossKind::Lag),
            "w" => Ok(LossKind::CostGuided),
            _ => Err(Error::Config(format!("unknown loss {s:?}; expected mse, lag or w"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Cosine schedule from `lr_start` at the first update to `lr_end` at
    /// the last.
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2500,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            lr_start: 1e-2,
            lr_end: 1e-3,
            seed: 0,
            layer_sizes: vec![2, 5, 5, 5, 1],
            init: InitScheme::XavierUniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("training needs at least one iteration".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_adam > 0.0) {
            return Err(Error::Config("Adam moments need β in [0, 1) and ε > 0".into()));
        }
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("network needs an input and an output layer".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.lr_start;
        }
        let frac = iteration.min(self.iterations - 1) as f64 / (self.iterations - 1) as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `π(x_i; θ) − u_i*` per sample.
pub fn residuals(policy: &MlpPolicy, dataset: &Dataset) -> Vec<Vec<f64>> {
    dataset
        .samples
        .iter()
        .map(|s| policy.forward(&s.x).iter().zip(&s.u_star).map(|(a, b)| a - b).collect())
        .collect()
}

/// Largest fitting error `max_i ‖Δπ_i‖`.
pub fn max_fit_error(policy: &MlpPolicy, dataset: &Dataset) -> f64 {
    residuals(policy, dataset).iter().map(|e| norm(e)).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.samples.is_empty() {
        return Err(Error::UndefinedLoss("dataset is empty".into()));
    }
    Ok(())
}

pub fn loss_mse(policy: &MlpPolicy, dataset: &Dataset) -> Result<f64> {
    check_dataset(dataset)?;
    let r = residuals(policy, dataset);
    Ok(r.iter().map(|e| e.iter().map(|a| a * a).sum::<f64>()).sum::<f64>() / r.len() as f64)
}

pub fn loss_w(policy: &MlpPolicy, dataset: &Dataset) -> Result<f64> {
    check_dataset(dataset)?;
    check_gamma(dataset)?;
    let r = residuals(policy, dataset);
    let sum: f64 = r.iter().zip(&dataset.samples).map(|(e, s)| s.sens.quadratic_form(e).abs()).sum();
    Ok(sum / dataset.gamma / r.len() as f64)
}

fn check_gamma(dataset: &Dataset) -> Result<()> {
    if !(dataset.gamma > 0.0) {
        return Err(Error::UndefinedLoss("γ = 0: every stored curvature vanishes".into()));
    }
    Ok(())
}

pub fn loss_lag<P: NlpProblem>(policy: &MlpPolicy, dataset: &Dataset, problems: &[P]) -> Result<f64> {
    let ctx = LagContext::new(dataset, problems)?;
    let terms: Vec<f64> = (0..dataset.samples.len())
        .into_par_iter()
        .map(|i| ctx.delta(i, &policy.forward(&dataset.samples[i].x)).map(|(d, _)| d * d))
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.at_sample(i)))
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Per-sample problems and the Lagrangian values at the stored optima,
/// computed once so each loss evaluation costs one rollout per sample.
struct LagContext<'d, P> {
    dataset: &'d Dataset,
    problems: &'d [P],
    base: Vec<f64>,
}

impl<'d, P: NlpProblem> LagContext<'d, P> {
    fn new(dataset: &'d Dataset, problems: &'d [P]) -> Result<Self> {
        check_dataset(dataset)?;
        check_dim("per-sample problems", dataset.samples.len(), problems.len())?;
        let base = dataset
            .samples
            .par_iter()
            .zip(problems)
            .map(|(s, p)| p.lagrangian_first(&s.w_star(), &s.lambda, &s.mu, s.u_star.len()).map(|r| r.0))
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| e.at_sample(i)))
            .collect::<Result<_>>()?;
        Ok(Self { dataset, problems, base })
    }

    /// `ΔL_i(u)` and its gradient in `u`.
    fn delta(&self, i: usize, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s = &self.dataset.samples[i];
        let mut w = s.w_star();
        w[..u.len()].copy_from_slice(u);
        let (value, grad) = self.problems[i].lagrangian_first(&w, &s.lambda, &s.mu, u.len())?;
        Ok((value - self.base[i], grad))
    }
}

/// Builds the per-sample OCPs that `L_lag` differentiates through.
pub fn problems_for<'a>(spec: &'a OcpSpec, dataset: &Dataset) -> Result<Vec<ShootingNlp<'a>>> {
    dataset.samples.iter().map(|s| s.problem(spec)).collect()
}

/// One sample's contribution: loss term, parameter gradient, and whether
/// the curvature form was negative.
#[derive(Clone, Debug)]
pub struct SampleTerm {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub negative_form: bool,
}

enum Evaluator<'d, P> {
    Mse,
    Weighted { gamma: f64 },
    Lag(LagContext<'d, P>),
}

impl<'d, P: NlpProblem> Evaluator<'d, P> {
    fn new(kind: LossKind, dataset: &'d Dataset, problems: &'d [P]) -> Result<Self> {
        check_dataset(dataset)?;
        Ok(match kind {
            LossKind::Mse => Evaluator::Mse,
            LossKind::CostGuided => {
                check_gamma(dataset)?;
                Evaluator::Weighted { gamma: dataset.gamma }
            }
            LossKind::Lag => Evaluator::Lag(LagContext::new(dataset, problems)?),
        })
    }

    fn term(&self, policy: &MlpPolicy, dataset: &Dataset, i: usize) -> Result<SampleTerm> {
        let s = &dataset.samples[i];
        let u = policy.forward(&s.x);
        let e: Vec<f64> = u.iter().zip(&s.u_star).map(|(a, b)| a - b).collect();
        let (loss, adjoint, negative_form): (f64, Vec<f64>, bool) = match self {
            Evaluator::Mse => (e.iter().map(|a| a * a).sum(), e.iter().map(|a| 2.0 * a).collect(), false),
            Evaluator::Weighted { gamma } => {
                let n = e.len();
                let le: Vec<f64> = (0..n).map(|r| (0..n).map(|c| s.sens.l_uu[r * n + c] * e[c]).sum()).collect();
                let q: f64 = le.iter().zip(&e).map(|(a, b)| a * b).sum();
                // subgradient of |q| is taken as 0 at q = 0
                let sign = if q > 0.0 {
                    1.0
                } else if q < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (q.abs() / gamma, le.iter().map(|v| sign * 2.0 * v / gamma).collect(), q < 0.0)
            }
            Evaluator::Lag(ctx) => {
                let (d, g) = ctx.delta(i, &u)?;
                (d * d, g.iter().map(|v| 2.0 * d * v).collect(), false)
            }
        };
        Ok(SampleTerm {
            loss,
            grad: policy.param_grad(&s.x, &adjoint),
            negative_form,
        })
    }

    fn terms(&self, policy: &MlpPolicy, dataset: &Dataset) -> Result<Vec<SampleTerm>> {
        (0..dataset.samples.len())
            .into_par_iter()
            .map(|i| self.term(policy, dataset, i))
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| e.at_sample(i)))
            .collect()
    }
}

/// Per-sample loss terms and gradients, unscaled by the sample count.
pub fn sample_terms<P: NlpProblem>(kind: LossKind, policy: &MlpPolicy, dataset: &Dataset, problems: &[P]) -> Result<Vec<SampleTerm>> {
    Evaluator::new(kind, dataset, problems)?.terms(policy, dataset)
}

/// Mean loss and its gradient; sums run in sample order so the result does
/// not depend on thread scheduling.
fn reduce(terms: &[SampleTerm], n_params: usize) -> (f64, Vec<f64>, usize) {
    let n = terms.len() as f64;
    let mut grad = vec![0.0; n_params];
    let mut loss = 0.0;
    let mut negative = 0;
    for t in terms {
        loss += t.loss;
        negative += usize::from(t.negative_form);
        for (g, v) in grad.iter_mut().zip(&t.grad) {
            *g += v;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad, negative)
}

pub fn loss_and_grad<P: NlpProblem>(kind: LossKind, policy: &MlpPolicy, dataset: &Dataset, problems: &[P]) -> Result<(f64, Vec<f64>)> {
    let terms = sample_terms(kind, policy, dataset, problems)?;
    let (l, g, _) = reduce(&terms, policy.n_params());
    Ok((l, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: MlpPolicy,
    /// Loss before each update, plus a final entry after the last one.
    pub curve: Vec<CurvePoint>,
    /// Sample-iterations where the curvature form `Δπᵀ L_uu Δπ` was negative.
    pub negative_forms: usize,
    pub wall_time_s: f64,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.curve.first().map_or(f64::NAN, |c| c.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |c| c.loss)
    }
}

/// Full-batch Adam from a freshly initialized network. `problems` is only
/// read for [`LossKind::Lag`] and may be empty otherwise.
pub fn train<P: NlpProblem>(
    dataset: &Dataset,
    kind: LossKind,
    cfg: &TrainConfig,
    normalization: &Normalization,
    problems: &[P],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut policy = MlpPolicy::init(cfg.seed, &cfg.layer_sizes, cfg.init, normalization.clone())?;
    check_dim("policy input", policy.n_x(), dataset.samples.first().map_or(0, |s| s.x.len()))?;
    let evaluator = Evaluator::new(kind, dataset, problems)?;
    let mut adam = Adam::new(policy.n_params(), cfg);
    let mut theta = policy.parameters();
    let mut curve = Vec::with_capacity(cfg.iterations + 1);
    let mut negative_forms = 0;
    let start = Instant::now();
    for it in 0..=cfg.iterations {
        let terms = evaluator.terms(&policy, dataset)?;
        let (loss, grad, negative) = reduce(&terms, theta.len());
        let grad_norm = norm(&grad);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: format!("loss {loss}, gradient norm {grad_norm}"),
            });
        }
        negative_forms += negative;
        curve.push(CurvePoint {
            iteration: it,
            loss,
            grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if it == cfg.iterations {
            break;
        }
        adam.step(&mut theta, &grad, cfg.learning_rate(it));
        policy.set_parameters(&theta)?;
    }
    let out = TrainOutcome {
        policy,
        curve,
        negative_forms,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if out.final_loss() > out.initial_loss() {
        log::warn!("{kind} training ended above its initial loss ({:.3e} > {:.3e})", out.final_loss(), out.initial_loss());
    }
    if negative_forms > 0 {
        log::info!("{kind}: curvature form negative in {negative_forms} sample-iterations");
    }
    Ok(out)
}

pub fn write_curve_csv(mut out: impl Write, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    for c in curve {
        w.serialize(c).map_err(|e| Error::Numerical(format!("curve CSV: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("curve CSV", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub l_mse: f64,
    pub l_w: f64,
    pub l_lag: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub m_hs: f64,
    pub m_js: f64,
    /// Radius of the ball the constants were sampled in; the cubic bound
    /// needs it to cover `epsilon`.
    pub radius: f64,
    /// `γ L_w + M_Hs ε³ / 6`.
    pub lag_bound: f64,
    /// `M_Js L_mse`.
    pub w_bound: f64,
    pub lag_holds: bool,
    pub w_holds: bool,
    pub radius_covers_epsilon: bool,
}

impl Certificate {
    pub fn holds(&self) -> bool {
        self.lag_holds && self.w_holds
    }
}

pub const CERTIFICATE_SLACK: f64 = 1e-9;

/// Evaluates the three losses at `policy` and checks
/// `L_lag ≤ γ L_w + M_Hs ε³ / 6` and `γ L_w ≤ M_Js L_mse`.
pub fn bound_certificate<P: NlpProblem>(
    policy: &MlpPolicy,
    dataset: &Dataset,
    problems: &[P],
    bounds: &BoundEstimate,
) -> Result<Certificate> {
    let l_mse = loss_mse(policy, dataset)?;
    let l_w = loss_w(policy, dataset)?;
    let l_lag = loss_lag(policy, dataset, problems)?;
    let gamma = dataset.gamma;
    let epsilon = max_fit_error(policy, dataset);
    let lag_bound = gamma * l_w + bounds.m_hs * epsilon.powi(3) / 6.0;
    let w_bound = bounds.m_js * l_mse;
    Ok(Certificate {
        l_mse,
        l_w,
        l_lag,
        gamma,
        epsilon,
        m_hs: bounds.m_hs,
        m_js: bounds.m_js,
        radius: bounds.radius,
        lag_bound,
        w_bound,
        lag_holds: l_lag <= lag_bound + CERTIFICATE_SLACK,
        w_holds: gamma * l_w <= w_bound + CERTIFICATE_SLACK,
        radius_covers_epsilon: bounds.radius >= epsilon,
    })
}

/// Samples the local constants in a ball large enough to contain every
/// fitting error of `policy` (at least `min_radius`), then certifies.
pub fn certify_policy<P: NlpProblem>(
    policy: &MlpPolicy,
    dataset: &Dataset,
    problems: &[P],
    min_radius: f64,
    pairs: usize,
    rng: &mut impl Rng,
) -> Result<(Certificate, BoundEstimate)> {
    check_dim("per-sample problems", dataset.samples.len(), problems.len())?;
    let epsilon = max_fit_error(policy, dataset);
    let radius = min_radius.max(epsilon);
    let w_stars: Vec<Vec<f64>> = dataset.samples.iter().map(|s| s.w_star()).collect();
    let n_u = dataset.samples.first().map_or(1, |s| s.u_star.len());
    let points = dataset.samples.iter().zip(problems).zip(&w_stars).map(|((s, p), w)| {
        (
            p,
            w.as_slice(),
            s.lambda.as_slice(),
            s.mu.as_slice(),
            s.sens.hessian_norm,
        )
    });
    let mut bounds = estimate_bounds(points, n_u, radius, pairs, rng)?;
    bounds.epsilon = epsilon;
    let cert = bound_certificate(policy, dataset, problems, &bounds)?;
    Ok((cert, bounds))
}

pub const POLICY_SCHEMA_VERSION: u32 = 1;
const POLICY_FORMAT: &str = "cgmpc-policy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub loss: LossKind,
    pub seed: u64,
    pub dataset_hash: String,
    /// Hash of the OCP the policy imitates.
    pub spec_hash: String,
    pub config_hash: String,
    pub reduction: ReductionMode,
    pub train: TrainConfig,
    pub negative_forms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub format: String,
    pub schema_version: u32,
    pub policy: MlpPolicy,
    pub provenance: TrainingProvenance,
    pub certificate: Option<Certificate>,
}

impl PolicyFile {
    pub fn new(policy: MlpPolicy, provenance: TrainingProvenance, certificate: Option<Certificate>) -> Self {
        Self {
            format: POLICY_FORMAT.into(),
            schema_version: POLICY_SCHEMA_VERSION,
            policy,
            provenance,
            certificate,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("policy serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(POLICY_FORMAT) {
            return Err(Error::parse(path, "not a policy file"));
        }
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != POLICY_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found,
                expected: POLICY_SCHEMA_VERSION,
            });
        }
        let file: PolicyFile = serde_json::from_value(raw).map_err(|e| Error::parse(path, e))?;
        file.policy.validate().map_err(|e| Error::parse(path, e))?;
        Ok(file)
    }
}
