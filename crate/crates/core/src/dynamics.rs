//! Continuous-time plant models and the fixed-step RK4 map used both inside
//! the optimal control problem and by the closed-loop simulator.

use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Real};
use crate::error::{check_dim, Error, Result};

/// Dimensionless CSTR with an exothermic first-order reaction.
///
/// States are the scaled concentration `x1` and reactor temperature `x2`;
/// the input is the coolant flow rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CstrModel {
    pub tau: f64,
    pub k: f64,
    pub beta: f64,
    pub x_f: f64,
    pub x_c: f64,
    pub alpha: f64,
}

impl Default for CstrModel {
    fn default() -> Self {
        Self {
            tau: 20.0,
            k: 300.0,
            beta: 5.0,
            x_f: 0.3947,
            x_c: 0.3816,
            alpha: 0.117,
        }
    }
}

impl CstrModel {
    pub fn validate(&self) -> Result<()> {
        let params = [
            ("tau", self.tau),
            ("k", self.k),
            ("beta", self.beta),
            ("x_f", self.x_f),
            ("x_c", self.x_c),
            ("alpha", self.alpha),
        ];
        for (name, v) in params {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "CSTR parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn rhs<T: Real>(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<()> {
        let (x1, x2, u) = (x[0], x[1], u[0]);
        if !(x2.value() > 0.0) {
            return Err(Error::Domain(format!(
                "CSTR temperature must be positive, got x2 = {}",
                x2.value()
            )));
        }
        let inv_tau = T::cst(1.0 / self.tau);
        let rate = T::cst(self.k) * x1 * (-(T::cst(self.beta) / x2)).exp();
        dx[0] = inv_tau * (T::cst(1.0) - x1) - rate;
        dx[1] = inv_tau * (T::cst(self.x_f) - x2) + rate - T::cst(self.alpha) * u * (x2 - T::cst(self.x_c));
        Ok(())
    }

    /// Time derivative of the state for a scalar input.
    pub fn derivative(&self, x: [f64; 2], u: f64) -> Result<[f64; 2]> {
        let mut dx = [0.0; 2];
        self.rhs(&x, &[u], &mut dx)?;
        Ok(dx)
    }

    /// Steady state with prescribed concentration `x1`: returns `(x, u)` with
    /// `derivative(x, u) == 0` (closed form).
    pub fn steady_state(&self, x1: f64) -> Result<([f64; 2], f64)> {
        if !(x1 > 0.0 && x1 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "steady-state concentration must lie in (0, 1), got {x1}"
            )));
        }
        // dx1 = 0 fixes the reaction rate; solve exp(-beta/x2) = (1 - x1)/(tau k x1).
        let target = (1.0 - x1) / (self.tau * self.k * x1);
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::Domain(format!("no steady state with x1 = {x1}")));
        }
        let x2 = -self.beta / target.ln();
        let rate = self.k * x1 * (-self.beta / x2).exp();
        let denom = self.alpha * (x2 - self.x_c);
        if denom.abs() < f64::EPSILON {
            return Err(Error::Domain("steady state requires x2 != x_c".into()));
        }
        let u = ((self.x_f - x2) / self.tau + rate) / denom;
        Ok(([x1, x2], u))
    }
}

/// `dx/dt = A x + B u` with row-major `A` (n_x × n_x) and `B` (n_x × n_u).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPlant {
    pub n_x: usize,
    pub n_u: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearPlant {
    pub fn new(n_x: usize, n_u: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_dim("A entries", n_x * n_x, a.len())?;
        check_dim("B entries", n_x * n_u, b.len())?;
        Ok(Self { n_x, n_u, a, b })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantModel {
    Cstr(CstrModel),
    Linear(LinearPlant),
}

impl PlantModel {
    pub fn n_x(&self) -> usize {
        match self {
            PlantModel::Cstr(_) => 2,
            PlantModel::Linear(p) => p.n_x,
        }
    }

    pub fn n_u(&self) -> usize {
        match self {
            PlantModel::Cstr(_) => 1,
            PlantModel::Linear(p) => p.n_u,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PlantModel::Cstr(m) => m.validate(),
            PlantModel::Linear(p) => {
                check_dim("A entries", p.n_x * p.n_x, p.a.len())?;
                check_dim("B entries", p.n_x * p.n_u, p.b.len())
            }
        }
    }

    pub fn rhs<T: Real>(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<()> {
        match self {
            PlantModel::Cstr(m) => m.rhs(x, u, dx),
            PlantModel::Linear(p) => {
                for (i, d) in dx.iter_mut().enumerate().take(p.n_x) {
                    let mut acc = T::cst(0.0);
                    for j in 0..p.n_x {
                        acc = acc + T::cst(p.a[i * p.n_x + j]) * x[j];
                    }
                    for j in 0..p.n_u {
                        acc = acc + T::cst(p.b[i * p.n_u + j]) * u[j];
                    }
                    *d = acc;
                }
                Ok(())
            }
        }
    }

    /// Value and Jacobians `(df/dx, df/du)`, both row-major.
    pub fn jacobian(&self, x: &[f64], u: &[f64], f: &mut [f64], jx: &mut [f64], ju: &mut [f64]) -> Result<()> {
        match self {
            PlantModel::Cstr(m) => {
                let xd = [Dual::<3>::variable(x[0], 0), Dual::<3>::variable(x[1], 1)];
                let ud = [Dual::<3>::variable(u[0], 2)];
                let mut out = [Dual::<3>::constant(0.0); 2];
                m.rhs(&xd, &ud, &mut out)?;
                for i in 0..2 {
                    f[i] = out[i].re;
                    jx[2 * i] = out[i].eps[0];
                    jx[2 * i + 1] = out[i].eps[1];
                    ju[i] = out[i].eps[2];
                }
                Ok(())
            }
            PlantModel::Linear(p) => {
                self.rhs(x, u, f)?;
                jx.copy_from_slice(&p.a);
                ju.copy_from_slice(&p.b);
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Sampling period.
    pub dt: f64,
    /// RK4 steps per sampling period.
    pub substeps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { dt: 1.0, substeps: 10 }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        self.dt / self.substeps as f64
    }
}

/// One sampling period of the plant under zero-order hold.
pub fn step(model: &PlantModel, x: &[f64], u: &[f64], cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_dim("state", model.n_x(), x.len())?;
    check_dim("input", model.n_u(), u.len())?;
    let mut next = x.to_vec();
    Rk4::new(model.n_x()).advance(model, &mut next, u, cfg)?;
    Ok(next)
}

/// Reusable RK4 workspace; plain stepping plus forward propagation of
/// state sensitivities with respect to a block of decision variables.
pub(crate) struct Rk4 {
    n_x: usize,
    k: [Vec<f64>; 4],
    xs: Vec<f64>,
    jx: Vec<f64>,
    ju: Vec<f64>,
    dk: [Vec<f64>; 4],
    ss: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n_x: usize) -> Self {
        Self {
            n_x,
            k: std::array::from_fn(|_| vec![0.0; n_x]),
            xs: vec![0.0; n_x],
            jx: Vec::new(),
            ju: Vec::new(),
            dk: std::array::from_fn(|_| Vec::new()),
            ss: Vec::new(),
        }
    }

    pub(crate) fn advance(&mut self, model: &PlantModel, x: &mut [f64], u: &[f64], cfg: &IntegratorConfig) -> Result<()> {
        let h = cfg.h();
        let n = self.n_x;
        for _ in 0..cfg.substeps {
            model.rhs(x, u, &mut self.k[0])?;
            for i in 0..n {
                self.xs[i] = x[i] + 0.5 * h * self.k[0][i];
            }
            model.rhs(&self.xs, u, &mut self.k[1])?;
            for i in 0..n {
                self.xs[i] = x[i] + 0.5 * h * self.k[1][i];
            }
            model.rhs(&self.xs, u, &mut self.k[2])?;
            for i in 0..n {
                self.xs[i] = x[i] + h * self.k[2][i];
            }
            model.rhs(&self.xs, u, &mut self.k[3])?;
            for i in 0..n {
                x[i] += h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite state after integration".into()));
        }
        Ok(())
    }

    /// Advances `x` one sampling period and propagates the sensitivity
    /// matrix `s` (row-major n_x × `ld`, only the first `cols` columns are
    /// touched). `input_col`, when set, is the column offset at which the
    /// held input equals the decision variables (du/dw = identity block).
    pub(crate) fn advance_tangent(
        &mut self,
        model: &PlantModel,
        x: &mut [f64],
        u: &[f64],
        cfg: &IntegratorConfig,
        s: &mut [f64],
        ld: usize,
        cols: usize,
        input_col: Option<usize>,
    ) -> Result<()> {
        let n = self.n_x;
        let n_u = u.len();
        let h = cfg.h();
        self.jx.resize(n * n, 0.0);
        self.ju.resize(n * n_u, 0.0);
        for d in &mut self.dk {
            d.resize(n * cols, 0.0);
        }
        self.ss.resize(n * cols, 0.0);
        let coef = [0.5 * h, 0.5 * h, h];
        for _ in 0..cfg.substeps {
            for stage in 0..4 {
                // stage point (xs, ss) from the previous stage
                if stage == 0 {
                    self.xs.copy_from_slice(x);
                    for i in 0..n {
                        self.ss[i * cols..(i + 1) * cols].copy_from_slice(&s[i * ld..i * ld + cols]);
                    }
                } else {
                    let c = coef[stage - 1];
                    for i in 0..n {
                        self.xs[i] = x[i] + c * self.k[stage - 1][i];
                        for col in 0..cols {
                            self.ss[i * cols + col] = s[i * ld + col] + c * self.dk[stage - 1][i * cols + col];
                        }
                    }
                }
                model.jacobian(&self.xs, u, &mut self.k[stage], &mut self.jx, &mut self.ju)?;
                let dk = &mut self.dk[stage];
                for i in 0..n {
                    let row = &mut dk[i * cols..(i + 1) * cols];
                    row.fill(0.0);
                    for j in 0..n {
                        let a = self.jx[i * n + j];
                        if a != 0.0 {
                            let src = &self.ss[j * cols..(j + 1) * cols];
                            for (r, v) in row.iter_mut().zip(src) {
                                *r += a * v;
                            }
                        }
                    }
                    if let Some(off) = input_col {
                        for j in 0..n_u {
                            if off + j < cols {
                                row[off + j] += self.ju[i * n_u + j];
                            }
                        }
                    }
                }
            }
            for i in 0..n {
                x[i] += h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
                for col in 0..cols {
                    s[i * ld + col] += h / 6.0
                        * (self.dk[0][i * cols + col]
                            + 2.0 * self.dk[1][i * cols + col]
                            + 2.0 * self.dk[2][i * cols + col]
                            + self.dk[3][i * cols + col]);
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite state after integration".into()));
        }
        Ok(())
    }
}
