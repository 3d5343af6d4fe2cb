//! Run configuration and content hashing.
//!
//! One TOML file drives a whole run. Every key has a default, so an empty
//! file reproduces the CSTR benchmark, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closed_loop::EvalConfig;
use crate::dataset::{Dataset, GenerationConfig, GridSpec, Sampling};
use crate::dynamics::{CstrModel, IntegratorConfig, PlantModel};
use crate::error::{Error, Result};
use crate::ocp::{OcpSpec, TerminalKind};
use crate::sensitivity::ReductionMode;
use crate::solver::SolverConfig;
use crate::training::{LossKind, TrainConfig};

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub tau: f64,
    pub k: f64,
    pub beta: f64,
    pub x_f: f64,
    pub x_c: f64,
    pub alpha: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        let m = CstrModel::default();
        Self {
            tau: m.tau,
            k: m.k,
            beta: m.beta,
            x_f: m.x_f,
            x_c: m.x_c,
            alpha: m.alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpSection {
    pub horizon: usize,
    pub dt: f64,
    pub substeps: usize,
    /// Concentration at the setpoint; temperature and input follow from the
    /// steady-state equations.
    pub setpoint_x1: f64,
    pub input_weight: f64,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub terminal: TerminalKind,
}

impl Default for OcpSection {
    fn default() -> Self {
        let s = OcpSpec::cstr_benchmark();
        Self {
            horizon: s.horizon,
            dt: s.integrator.dt,
            substeps: s.integrator.substeps,
            setpoint_x1: 0.2632,
            input_weight: s.input_weight,
            x_lo: s.x_lo,
            x_hi: s.x_hi,
            u_lo: s.u_lo,
            u_hi: s.u_hi,
            terminal: s.terminal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub step: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { step: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateSection {
    /// Smallest radius over which the local constants are estimated; the
    /// fitted error ε is used when larger.
    pub min_radius: f64,
    /// Random input pairs per sample for the constant estimates.
    pub pairs: usize,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self { min_radius: 0.05, pairs: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed; the evaluation scenarios use `eval.seed`.
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub out: PathBuf,
    pub reduction: ReductionMode,
    pub plant: PlantSection,
    pub ocp: OcpSection,
    pub grid: GridSection,
    pub solver: SolverConfig,
    /// Shared training settings; `train_mse`, `train_lag` and `train_w`
    /// replace them for one loss. The run seed always wins.
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_mse: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_lag: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_w: Option<TrainConfig>,
    /// `workers` here is ignored in favour of the top-level key.
    pub eval: EvalConfig,
    pub certificate: CertificateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out: PathBuf::from("out"),
            reduction: ReductionMode::Direct,
            plant: PlantSection::default(),
            ocp: OcpSection::default(),
            grid: GridSection::default(),
            solver: SolverConfig::default(),
            train: TrainConfig::default(),
            train_mse: None,
            train_lag: None,
            train_w: None,
            eval: EvalConfig::default(),
            certificate: CertificateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.ocp_spec()?.validate().map_err(cfg_err)?;
        self.grid_spec()?.validate().map_err(cfg_err)?;
        let per_loss = [&self.train_mse, &self.train_lag, &self.train_w];
        if self.train.seed != 0 || per_loss.iter().any(|t| t.as_ref().is_some_and(|t| t.seed != 0)) {
            return Err(Error::Config("set the training seed with the top-level `seed` key".into()));
        }
        for kind in LossKind::ALL {
            let t = self.train_config(kind);
            t.validate()?;
            if t.layer_sizes.first() != Some(&2) || t.layer_sizes.last() != Some(&1) {
                return Err(Error::Config(format!("{kind} network must map 2 states to 1 input")));
            }
        }
        let s = &self.solver;
        if [s.tol_kkt, s.tol_feas, s.tol_act, s.tol_mu, s.tol_comp].iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if self.eval.steps == 0 {
            return Err(Error::Config("evaluation needs at least one step".into()));
        }
        if !(self.certificate.min_radius > 0.0) || self.certificate.pairs == 0 {
            return Err(Error::Config("certificate needs a positive radius and at least one pair".into()));
        }
        Ok(())
    }

    pub fn ocp_spec(&self) -> Result<OcpSpec> {
        let p = &self.plant;
        let model = CstrModel {
            tau: p.tau,
            k: p.k,
            beta: p.beta,
            x_f: p.x_f,
            x_c: p.x_c,
            alpha: p.alpha,
        };
        model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let (x_sp, u_e) = model
            .steady_state(self.ocp.setpoint_x1)
            .map_err(|e| Error::Config(format!("setpoint: {e}")))?;
        let o = &self.ocp;
        Ok(OcpSpec {
            model: PlantModel::Cstr(model),
            horizon: o.horizon,
            integrator: IntegratorConfig {
                dt: o.dt,
                substeps: o.substeps,
            },
            x_sp: x_sp.to_vec(),
            u_e: vec![u_e],
            input_weight: o.input_weight,
            x_lo: o.x_lo.clone(),
            x_hi: o.x_hi.clone(),
            u_lo: o.u_lo.clone(),
            u_hi: o.u_hi.clone(),
            terminal: o.terminal,
        })
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.ocp.x_lo.clone(), self.ocp.x_hi.clone(), self.grid.step).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            solver: self.solver.clone(),
            reduction: self.reduction,
            workers: self.workers,
            seed: self.seed,
        }
    }

    /// Training settings for `kind` with the run seed applied.
    pub fn train_config(&self, kind: LossKind) -> TrainConfig {
        let specific = match kind {
            LossKind::Mse => &self.train_mse,
            LossKind::Lag => &self.train_lag,
            LossKind::CostGuided => &self.train_w,
        };
        TrainConfig {
            seed: self.seed,
            ..specific.clone().unwrap_or_else(|| self.train.clone())
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            workers: self.workers,
            ..self.eval.clone()
        }
    }

    /// Hash of every setting that can change a result. Worker count and
    /// output directory are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        c.eval.workers = 0;
        c.out = PathBuf::new();
        content_hash(&c)
    }

    /// Checks that `dataset` was generated under this config's OCP, grid,
    /// solver and reduction settings.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let p = &dataset.provenance;
        let mut diffs = Vec::new();
        if p.spec_hash != content_hash(&self.ocp_spec()?) {
            diffs.push("OCP");
        }
        if p.solver != self.solver {
            diffs.push("solver");
        }
        if p.reduction != self.reduction {
            diffs.push("reduction");
        }
        if p.sampling != Sampling::Grid(self.grid_spec()?) {
            diffs.push("grid");
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::HashMismatch(format!("dataset was generated with different {} settings", diffs.join(", "))))
        }
    }
}
