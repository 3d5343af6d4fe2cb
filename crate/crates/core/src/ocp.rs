//! Horizon-N tracking MPC problem transcribed by single shooting.
//!
//! Decision variables are the inputs `w = [u(0), …, u(N-1)]`; states are
//! eliminated by simulating the RK4 map, so the equality block `c` is empty
//! and every state constraint enters `g` through the shooting map.
//!
//! Inequality rows are stacked as
//! 1. input box, per step `k`: `u_k - u_hi`, `u_lo - u_k`
//! 2. state box for `k = 1..N-1`: `x_k - x_hi`, `x_lo - x_k`
//! 3. terminal box on `x_N` (when the terminal set is `X`).

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{CstrModel, IntegratorConfig, LinearPlant, PlantModel, Rk4};
use crate::error::{check_dim, Error, Result};
use crate::nlp::{Evaluation, NlpProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    /// `ℓ_f(x) = ‖x - x_sp‖²` and terminal set equal to the state box.
    StageState,
    /// No terminal cost or terminal constraint.
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpSpec {
    pub model: PlantModel,
    pub horizon: usize,
    pub integrator: IntegratorConfig,
    pub x_sp: Vec<f64>,
    pub u_e: Vec<f64>,
    pub input_weight: f64,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub terminal: TerminalKind,
}

impl OcpSpec {
    /// CSTR benchmark: N = 140, 1 s sampling, setpoint at the exact steady
    /// state with `x1 = 0.2632`.
    pub fn cstr_benchmark() -> Self {
        let model = CstrModel::default();
        let (x_sp, u_e) = model.steady_state(0.2632).expect("benchmark steady state");
        Self {
            model: PlantModel::Cstr(model),
            horizon: 140,
            integrator: IntegratorConfig::default(),
            x_sp: x_sp.to_vec(),
            u_e: vec![u_e],
            input_weight: 1e-4,
            x_lo: vec![0.0632, 0.4519],
            x_hi: vec![0.4632, 0.8519],
            u_lo: vec![0.0],
            u_hi: vec![2.0],
            terminal: TerminalKind::StageState,
        }
    }

    /// Double integrator with friction under a quadratic cost; the shooting
    /// map is linear, so the Lagrangian curvature is parameter independent.
    pub fn linear_benchmark(horizon: usize) -> Self {
        let plant = LinearPlant::new(2, 1, vec![0.0, 1.0, 0.0, -0.5], vec![0.0, 1.0]).expect("static dims");
        Self {
            model: PlantModel::Linear(plant),
            horizon,
            integrator: IntegratorConfig { dt: 0.5, substeps: 4 },
            x_sp: vec![0.0, 0.0],
            u_e: vec![0.0],
            input_weight: 1e-2,
            x_lo: vec![-5.0, -5.0],
            x_hi: vec![5.0, 5.0],
            u_lo: vec![-3.0],
            u_hi: vec![3.0],
            terminal: TerminalKind::StageState,
        }
    }

    pub fn n_x(&self) -> usize {
        self.model.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.model.n_u()
    }

    pub fn n_w(&self) -> usize {
        self.horizon * self.n_u()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.integrator.validate()?;
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let (n_x, n_u) = (self.n_x(), self.n_u());
        check_dim("x_sp", n_x, self.x_sp.len())?;
        check_dim("x_lo", n_x, self.x_lo.len())?;
        check_dim("x_hi", n_x, self.x_hi.len())?;
        check_dim("u_e", n_u, self.u_e.len())?;
        check_dim("u_lo", n_u, self.u_lo.len())?;
        check_dim("u_hi", n_u, self.u_hi.len())?;
        for i in 0..n_x {
            if !(self.x_lo[i] < self.x_hi[i]) {
                return Err(Error::InvalidArgument(format!("state box empty in dimension {i}")));
            }
            if !(self.x_lo[i] < self.x_sp[i] && self.x_sp[i] < self.x_hi[i]) {
                return Err(Error::InvalidArgument("setpoint must lie strictly inside the state box".into()));
            }
        }
        for i in 0..n_u {
            if !(self.u_lo[i] < self.u_hi[i]) {
                return Err(Error::InvalidArgument(format!("input box empty in dimension {i}")));
            }
        }
        if !(self.input_weight >= 0.0) {
            return Err(Error::InvalidArgument("input weight must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn contains_state(&self, x: &[f64]) -> bool {
        x.len() == self.n_x() && x.iter().enumerate().all(|(i, v)| *v >= self.x_lo[i] && *v <= self.x_hi[i])
    }

    /// Depth by which `x` lies outside the state box (0 inside).
    pub fn state_violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.x_hi[i]).max(self.x_lo[i] - v).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn clip_input(&self, u: &mut [f64]) -> bool {
        let mut clipped = false;
        for (i, v) in u.iter_mut().enumerate() {
            let c = v.clamp(self.u_lo[i], self.u_hi[i]);
            clipped |= c != *v;
            *v = c;
        }
        clipped
    }

    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let sx: f64 = x.iter().zip(&self.x_sp).map(|(a, b)| (a - b) * (a - b)).sum();
        let su: f64 = u.iter().zip(&self.u_e).map(|(a, b)| (a - b) * (a - b)).sum();
        sx + self.input_weight * su
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        match self.terminal {
            TerminalKind::StageState => x.iter().zip(&self.x_sp).map(|(a, b)| (a - b) * (a - b)).sum(),
            TerminalKind::Free => 0.0,
        }
    }

    fn has_terminal_box(&self) -> bool {
        matches!(self.terminal, TerminalKind::StageState)
    }

    pub fn n_ineq(&self) -> usize {
        let (n_x, n_u, n) = (self.n_x(), self.n_u(), self.horizon);
        2 * n * n_u + 2 * n_x * (n - 1) + if self.has_terminal_box() { 2 * n_x } else { 0 }
    }

    /// Decodes an inequality row index.
    pub fn constraint_info(&self, index: usize) -> ConstraintInfo {
        let (n_x, n_u, n) = (self.n_x(), self.n_u(), self.horizon);
        let n_in = 2 * n * n_u;
        if index < n_in {
            return ConstraintInfo {
                kind: ConstraintKind::Input,
                step: index / (2 * n_u),
                component: (index % (2 * n_u)) / 2,
                upper: index % 2 == 0,
            };
        }
        let r = index - n_in;
        let kind = if r < 2 * n_x * (n - 1) { ConstraintKind::State } else { ConstraintKind::Terminal };
        ConstraintInfo {
            kind,
            step: 1 + r / (2 * n_x),
            component: (r % (2 * n_x)) / 2,
            upper: r % 2 == 0,
        }
    }

    pub fn equilibrium_plan(&self) -> Vec<f64> {
        (0..self.horizon).flat_map(|_| self.u_e.iter().copied()).collect()
    }

    /// Infinite-horizon LQR gain of the sampled linearization at the
    /// setpoint, row-major n_u × n_x, for `u = u_e - K (x - x_sp)`.
    pub fn lqr_gain(&self) -> Result<Vec<f64>> {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let nz = n_x + n_u;
        let mut jac = vec![0.0; n_x * nz];
        for i in 0..n_x {
            jac[i * nz + i] = 1.0;
        }
        let mut x = self.x_sp.clone();
        Rk4::new(n_x).advance_tangent(&self.model, &mut x, &self.u_e, &self.integrator, &mut jac, nz, nz, Some(n_x))?;
        let full = DMatrix::from_row_slice(n_x, nz, &jac);
        let a = full.columns(0, n_x).into_owned();
        let b = full.columns(n_x, n_u).into_owned();
        let q = DMatrix::<f64>::identity(n_x, n_x);
        let r = DMatrix::<f64>::identity(n_u, n_u) * self.input_weight;
        let mut p = q.clone();
        let mut k = DMatrix::zeros(n_u, n_x);
        for _ in 0..100_000 {
            let btp = b.transpose() * &p;
            let gram = &r + &btp * &b;
            k = gram
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("Riccati iteration lost definiteness".into()))?
                .solve(&(&btp * &a));
            let next = &q + a.transpose() * &p * (&a - &b * &k);
            let next = (&next + next.transpose()) * 0.5;
            let change = (&next - &p).amax();
            p = next;
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical("Riccati iteration diverged".into()));
            }
            if change <= 1e-12 * (1.0 + p.amax()) {
                return Ok(k.transpose().as_slice().to_vec());
            }
        }
        let _ = k;
        Err(Error::Numerical("Riccati iteration did not converge".into()))
    }

    /// Plan from simulating the clipped LQR law from `p`; a cheap and
    /// usually feasible starting point for the solver.
    pub fn lqr_plan(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_dim("initial state", self.n_x(), p.len())?;
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let k = self.lqr_gain()?;
        let mut rk = Rk4::new(n_x);
        let mut x = p.to_vec();
        let mut w = Vec::with_capacity(self.n_w());
        for _ in 0..self.horizon {
            let mut u: Vec<f64> = (0..n_u)
                .map(|j| self.u_e[j] - (0..n_x).map(|i| k[j * n_x + i] * (x[i] - self.x_sp[i])).sum::<f64>())
                .collect();
            self.clip_input(&mut u);
            if rk.advance(&self.model, &mut x, &u, &self.integrator).is_err() {
                w.extend_from_slice(&self.u_e);
                continue;
            }
            w.extend_from_slice(&u);
        }
        Ok(w)
    }

    /// Plan shifted by one step, repeating the last input.
    pub fn shift_plan(&self, w: &[f64]) -> Vec<f64> {
        let n_u = self.n_u();
        let mut out = w[n_u..].to_vec();
        out.extend_from_slice(&w[w.len() - n_u..]);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    Input,
    State,
    Terminal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstraintInfo {
    pub kind: ConstraintKind,
    pub step: usize,
    pub component: usize,
    pub upper: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `x(0), …, x(N)`.
    pub states: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    pub terminal_cost: f64,
}

pub fn stage_cost(x: &[f64], u: &[f64], spec: &OcpSpec) -> f64 {
    spec.stage_cost(x, u)
}

/// Simulates the plan from `p` and returns the accumulated cost with the trajectory.
pub fn rollout_cost(w: &[f64], p: &[f64], spec: &OcpSpec) -> Result<(f64, Trajectory)> {
    check_dim("decision vector", spec.n_w(), w.len())?;
    check_dim("initial state", spec.n_x(), p.len())?;
    let n_u = spec.n_u();
    let mut rk = Rk4::new(spec.n_x());
    let mut x = p.to_vec();
    let mut states = Vec::with_capacity(spec.horizon + 1);
    let mut stage_costs = Vec::with_capacity(spec.horizon);
    states.push(x.clone());
    for k in 0..spec.horizon {
        let u = &w[k * n_u..(k + 1) * n_u];
        stage_costs.push(spec.stage_cost(&x, u));
        rk.advance(&spec.model, &mut x, u, &spec.integrator)?;
        states.push(x.clone());
    }
    let terminal_cost = spec.terminal_cost(&x);
    let total = stage_costs.iter().sum::<f64>() + terminal_cost;
    Ok((
        total,
        Trajectory {
            states,
            stage_costs,
            terminal_cost,
        },
    ))
}

/// The NLP `P(p)` for one initial state.
#[derive(Clone, Debug)]
pub struct ShootingNlp<'a> {
    spec: &'a OcpSpec,
    p: Vec<f64>,
}

pub fn build_nlp<'a>(spec: &'a OcpSpec, p: &[f64]) -> Result<ShootingNlp<'a>> {
    spec.validate()?;
    check_dim("initial state", spec.n_x(), p.len())?;
    if !spec.contains_state(p) {
        return Err(Error::InvalidArgument(format!("initial state {p:?} lies outside the state box")));
    }
    Ok(ShootingNlp { spec, p: p.to_vec() })
}

impl<'a> ShootingNlp<'a> {
    pub fn spec(&self) -> &'a OcpSpec {
        self.spec
    }

    pub fn parameter(&self) -> &[f64] {
        &self.p
    }

    /// Forward sweep; `visit(k, x_k, S_k)` is called for `k = 0..=N` where
    /// `S_k` is `dx_k/dw[0..cols]` (row-major n_x × cols) when `cols > 0`.
    fn sweep(&self, w: &[f64], cols: usize, mut visit: impl FnMut(usize, &[f64], &[f64])) -> Result<()> {
        check_dim("decision vector", self.spec.n_w(), w.len())?;
        let spec = self.spec;
        let (n_x, n_u) = (spec.n_x(), spec.n_u());
        let mut rk = Rk4::new(n_x);
        let mut x = self.p.clone();
        let mut s = vec![0.0; n_x * cols];
        visit(0, &x, &s);
        for k in 0..spec.horizon {
            let u = &w[k * n_u..(k + 1) * n_u];
            if cols == 0 {
                rk.advance(&spec.model, &mut x, u, &spec.integrator)?;
            } else {
                let off = k * n_u;
                let input_col = (off < cols).then_some(off);
                let active = ((k + 1) * n_u).min(cols);
                rk.advance_tangent(&spec.model, &mut x, u, &spec.integrator, &mut s, cols, active, input_col)?;
            }
            visit(k + 1, &x, &s);
        }
        Ok(())
    }

    fn input_rows(&self, w: &[f64], g: &mut Vec<f64>) {
        let spec = self.spec;
        let n_u = spec.n_u();
        for k in 0..spec.horizon {
            for j in 0..n_u {
                let u = w[k * n_u + j];
                g.push(u - spec.u_hi[j]);
                g.push(spec.u_lo[j] - u);
            }
        }
    }

    fn input_cost(&self, w: &[f64]) -> f64 {
        let n_u = self.spec.n_u();
        w.iter()
            .enumerate()
            .map(|(i, u)| (u - self.spec.u_e[i % n_u]).powi(2))
            .sum::<f64>()
            * self.spec.input_weight
    }

    /// Jacobian `[A | B]` (row-major n_x × (n_x + n_u)) of one sampling
    /// period at `(x, u)`, advancing `x` in place.
    fn period_jacobian(&self, rk: &mut Rk4, x: &mut [f64], u: &[f64], jac: &mut [f64]) -> Result<()> {
        let n_x = x.len();
        let nz = n_x + u.len();
        jac.fill(0.0);
        for i in 0..n_x {
            jac[i * nz + i] = 1.0;
        }
        rk.advance_tangent(&self.spec.model, x, u, &self.spec.integrator, jac, nz, nz, Some(n_x))
    }

    fn hessian(&self, w: &[f64], mu: &[f64]) -> Result<DMatrix<f64>> {
        check_dim("decision vector", self.spec.n_w(), w.len())?;
        check_dim("inequality multipliers", self.spec.n_ineq(), mu.len())?;
        let spec = self.spec;
        let (n_x, n_u, n_w, n) = (spec.n_x(), spec.n_u(), spec.n_w(), spec.horizon);
        let nz = n_x + n_u;
        let mut rk = Rk4::new(n_x);
        let (xs, jacs) = self.period_jacobians(w)?;

        // backward pass: adjoints nu_k = dL/dx_k (future inputs fixed)
        let mut state_mult = vec![vec![0.0; n_x]; n + 1];
        let mut row = 2 * n_w;
        for (k, m) in state_mult.iter_mut().enumerate() {
            if self.state_rows_active(k) {
                for v in m.iter_mut() {
                    *v = mu[row] - mu[row + 1];
                    row += 2;
                }
            }
        }
        let mut adj = vec![vec![0.0; n_x]; n + 1];
        for k in (1..=n).rev() {
            for i in 0..n_x {
                let mut v = state_mult[k][i];
                if self.state_cost_active(k) {
                    v += 2.0 * (xs[k][i] - spec.x_sp[i]);
                }
                if k < n {
                    v += (0..n_x).map(|r| jacs[k][r * nz + i] * adj[k + 1][r]).sum::<f64>();
                }
                adj[k][i] = v;
            }
        }

        // curvature of each period map weighted by its adjoint, by forward
        // differences of the exact Jacobian; the solver is the only consumer
        // and tolerates the O(step) error
        let mut qs = Vec::with_capacity(n);
        let mut jp = vec![0.0; n_x * nz];
        for k in 0..n {
            let u = &w[k * n_u..(k + 1) * n_u];
            let nu = &adj[k + 1];
            let jac = &jacs[k];
            let mut q = vec![0.0; nz * nz];
            for a in 0..nz {
                let mut zp: Vec<f64> = xs[k].iter().chain(u).copied().collect();
                let step = 1e-7 * (1.0 + zp[a].abs());
                zp[a] += step;
                let mut xp = zp[..n_x].to_vec();
                self.period_jacobian(&mut rk, &mut xp, &zp[n_x..], &mut jp)?;
                for b in 0..nz {
                    q[b * nz + a] = (0..n_x).map(|r| nu[r] * (jp[r * nz + b] - jac[r * nz + b])).sum::<f64>() / step;
                }
            }
            for a in 0..nz {
                for b in 0..a {
                    let m = 0.5 * (q[a * nz + b] + q[b * nz + a]);
                    q[a * nz + b] = m;
                    q[b * nz + a] = m;
                }
            }
            if k > 0 && self.state_cost_active(k) {
                for i in 0..n_x {
                    q[i * nz + i] += 2.0;
                }
            }
            for j in 0..n_u {
                q[(n_x + j) * nz + n_x + j] += 2.0 * spec.input_weight;
            }
            qs.push(q);
        }

        let mut p_n = vec![0.0; n_x * n_x];
        if self.state_cost_active(n) {
            for i in 0..n_x {
                p_n[i * n_x + i] = 2.0;
            }
        }
        Ok(assemble(&jacs, &qs, p_n, n_x, n_u))
    }

    /// States `x_0..=x_N` and period Jacobians `[A_k | B_k]`.
    fn period_jacobians(&self, w: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let spec = self.spec;
        let (n_x, n_u, n) = (spec.n_x(), spec.n_u(), spec.horizon);
        let mut rk = Rk4::new(n_x);
        let mut xs = Vec::with_capacity(n + 1);
        let mut jacs = Vec::with_capacity(n);
        let mut x = self.p.clone();
        xs.push(x.clone());
        for k in 0..n {
            let mut jac = vec![0.0; n_x * (n_x + n_u)];
            self.period_jacobian(&mut rk, &mut x, &w[k * n_u..(k + 1) * n_u], &mut jac)?;
            jacs.push(jac);
            xs.push(x.clone());
        }
        Ok((xs, jacs))
    }

    fn state_rows_active(&self, k: usize) -> bool {
        (k >= 1 && k < self.spec.horizon) || (k == self.spec.horizon && self.spec.has_terminal_box())
    }

    fn state_cost_active(&self, k: usize) -> bool {
        k < self.spec.horizon || matches!(self.spec.terminal, TerminalKind::StageState)
    }
}

/// Hessian of `sum_k q_k(x_k, u_k) + x_N' P_N x_N / 2` in the inputs, for
/// period Jacobians `[A_k | B_k]` and stage curvatures `Q_k` (both row-major).
/// Second-order adjoint: with `P_k = sum_{m >= k} Phi(m,k)' Qxx_m Phi(m,k)`,
///   H[k,k] = Quu_k + B_k' P_{k+1} B_k
///   H[c,k] = S_k[:,c]' (A_k' P_{k+1} B_k + Qxu_k),  c < k,
/// where `S_k = dx_k/dw`. Costs O(N^2) instead of O(N^3).
fn assemble(jacs: &[Vec<f64>], qs: &[Vec<f64>], mut p: Vec<f64>, n_x: usize, n_u: usize) -> DMatrix<f64> {
    let n = jacs.len();
    let nz = n_x + n_u;
    let n_w = n * n_u;
    let mut h = DMatrix::<f64>::zeros(n_w, n_w);
    let mut ms = vec![vec![0.0; n_x * n_u]; n];
    let mut pb = vec![0.0; n_x * n_u];
    let mut pa = vec![0.0; n_x * n_x];
    for k in (0..n).rev() {
        let (jac, q) = (&jacs[k], &qs[k]);
        let a = |i: usize, j: usize| jac[i * nz + j];
        let b = |i: usize, j: usize| jac[i * nz + n_x + j];
        for i in 0..n_x {
            for j in 0..n_u {
                pb[i * n_u + j] = (0..n_x).map(|r| p[i * n_x + r] * b(r, j)).sum();
            }
            for j in 0..n_x {
                pa[i * n_x + j] = (0..n_x).map(|r| p[i * n_x + r] * a(r, j)).sum();
            }
        }
        for i in 0..n_x {
            for j in 0..n_u {
                ms[k][i * n_u + j] = q[i * nz + n_x + j] + (0..n_x).map(|r| a(r, i) * pb[r * n_u + j]).sum::<f64>();
            }
        }
        for i in 0..n_u {
            for j in 0..n_u {
                h[(k * n_u + i, k * n_u + j)] = q[(n_x + i) * nz + n_x + j] + (0..n_x).map(|r| b(r, i) * pb[r * n_u + j]).sum::<f64>();
            }
        }
        for i in 0..n_x {
            for j in 0..n_x {
                p[i * n_x + j] = q[i * nz + j] + (0..n_x).map(|r| a(r, i) * pa[r * n_x + j]).sum::<f64>();
            }
        }
    }
    let mut s = vec![0.0; n_x * n_w];
    let mut next = vec![0.0; n_x * n_w];
    for k in 0..n {
        let cols = k * n_u;
        let jac = &jacs[k];
        for c in 0..cols {
            for j in 0..n_u {
                let v: f64 = (0..n_x).map(|i| s[i * n_w + c] * ms[k][i * n_u + j]).sum();
                h[(c, cols + j)] = v;
                h[(cols + j, c)] = v;
            }
        }
        advance_sensitivity(jac, &s, &mut next, n_x, n_u, cols);
        std::mem::swap(&mut s, &mut next);
    }
    h
}

/// `S_{k+1} = A_k S_k + B_k E_k`, where `S_k` has `cols` live columns.
fn advance_sensitivity(jac: &[f64], s: &[f64], next: &mut [f64], n_x: usize, n_u: usize, cols: usize) {
    let nz = n_x + n_u;
    let n_w = s.len() / n_x;
    for i in 0..n_x {
        for c in 0..cols {
            next[i * n_w + c] = (0..n_x).map(|r| jac[i * nz + r] * s[r * n_w + c]).sum();
        }
        for j in 0..n_u {
            if cols + j < n_w {
                next[i * n_w + cols + j] = jac[i * nz + n_x + j];
            }
        }
    }
}

impl NlpProblem for ShootingNlp<'_> {
    fn n_w(&self) -> usize {
        self.spec.n_w()
    }
    fn n_eq(&self) -> usize {
        0
    }
    fn n_ineq(&self) -> usize {
        self.spec.n_ineq()
    }

    fn values(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let spec = self.spec;
        let mut g = Vec::with_capacity(spec.n_ineq());
        self.input_rows(w, &mut g);
        let mut j = self.input_cost(w);
        self.sweep(w, 0, |k, x, _| {
            if self.state_cost_active(k) {
                j += x.iter().zip(&spec.x_sp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            if self.state_rows_active(k) {
                for i in 0..x.len() {
                    g.push(x[i] - spec.x_hi[i]);
                    g.push(spec.x_lo[i] - x[i]);
                }
            }
        })?;
        Ok((j, Vec::new(), g))
    }

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        let spec = self.spec;
        let (n_x, n_u, n_w) = (spec.n_x(), spec.n_u(), spec.n_w());
        let n_g = spec.n_ineq();
        let mut g = Vec::with_capacity(n_g);
        self.input_rows(w, &mut g);
        let mut jac = DMatrix::zeros(n_g, n_w);
        for k in 0..spec.horizon {
            for j in 0..n_u {
                let col = k * n_u + j;
                let row = 2 * col;
                jac[(row, col)] = 1.0;
                jac[(row + 1, col)] = -1.0;
            }
        }
        let mut cost = self.input_cost(w);
        let mut grad = vec![0.0; n_w];
        for (i, u) in w.iter().enumerate() {
            grad[i] = 2.0 * spec.input_weight * (u - spec.u_e[i % n_u]);
        }
        let (xs, jacs) = self.period_jacobians(w)?;
        let mut s = vec![0.0; n_x * n_w];
        let mut next = vec![0.0; n_x * n_w];
        for (k, x) in xs.iter().enumerate() {
            let active = (k * n_u).min(n_w);
            if self.state_cost_active(k) {
                for i in 0..n_x {
                    let e = x[i] - spec.x_sp[i];
                    cost += e * e;
                    for (c, v) in s[i * n_w..i * n_w + active].iter().enumerate() {
                        grad[c] += 2.0 * e * v;
                    }
                }
            }
            if self.state_rows_active(k) {
                for i in 0..n_x {
                    let r = g.len();
                    g.push(x[i] - spec.x_hi[i]);
                    g.push(spec.x_lo[i] - x[i]);
                    for c in 0..active {
                        let v = s[i * n_w + c];
                        jac[(r, c)] = v;
                        jac[(r + 1, c)] = -v;
                    }
                }
            }
            if k < spec.horizon {
                advance_sensitivity(&jacs[k], &s, &mut next, n_x, n_u, active);
                std::mem::swap(&mut s, &mut next);
            }
        }
        // Gauss-Newton: the same assembly with the dynamics curvature dropped
        let nz = n_x + n_u;
        let qs: Vec<Vec<f64>> = (0..spec.horizon)
            .map(|k| {
                let mut q = vec![0.0; nz * nz];
                if k > 0 && self.state_cost_active(k) {
                    for i in 0..n_x {
                        q[i * nz + i] = 2.0;
                    }
                }
                for j in 0..n_u {
                    q[(n_x + j) * nz + n_x + j] = 2.0 * spec.input_weight;
                }
                q
            })
            .collect();
        let mut p_n = vec![0.0; n_x * n_x];
        if self.state_cost_active(spec.horizon) {
            for i in 0..n_x {
                p_n[i * n_x + i] = 2.0;
            }
        }
        let gn = assemble(&jacs, &qs, p_n, n_x, n_u);
        Ok(Evaluation {
            cost,
            grad: DVector::from_vec(grad),
            eq: DVector::zeros(0),
            eq_jac: DMatrix::zeros(0, n_w),
            ineq: DVector::from_vec(g),
            ineq_jac: jac,
            gauss_newton: Some(gn),
        })
    }

    fn exact_hessian(&self, w: &[f64], _lambda: &[f64], mu: &[f64]) -> Option<Result<DMatrix<f64>>> {
        Some(self.hessian(w, mu))
    }

    fn lagrangian_first(&self, w: &[f64], _lambda: &[f64], mu: &[f64], n_u: usize) -> Result<(f64, Vec<f64>)> {
        let spec = self.spec;
        if n_u != spec.n_u() {
            let (j, _, g) = self.values(w)?;
            let value = j + mu.iter().zip(&g).map(|(m, v)| m * v).sum::<f64>();
            return Ok((value, self.lagrangian_partial(w, &[], mu, 0..n_u)?));
        }
        check_dim("inequality multipliers", spec.n_ineq(), mu.len())?;
        let n_x = spec.n_x();
        let mut value = self.input_cost(w);
        let mut rows = Vec::with_capacity(2 * spec.n_w());
        self.input_rows(w, &mut rows);
        value += mu.iter().zip(&rows).map(|(m, v)| m * v).sum::<f64>();
        let mut grad: Vec<f64> = (0..n_u)
            .map(|j| 2.0 * spec.input_weight * (w[j] - spec.u_e[j]) + mu[2 * j] - mu[2 * j + 1])
            .collect();
        let mut row = rows.len();
        self.sweep(w, n_u, |k, x, s| {
            if self.state_cost_active(k) {
                for i in 0..n_x {
                    let e = x[i] - spec.x_sp[i];
                    value += e * e;
                    for j in 0..n_u {
                        grad[j] += 2.0 * e * s[i * n_u + j];
                    }
                }
            }
            if self.state_rows_active(k) {
                for i in 0..n_x {
                    let (up, down) = (mu[row], mu[row + 1]);
                    value += up * (x[i] - spec.x_hi[i]) + down * (spec.x_lo[i] - x[i]);
                    let m = up - down;
                    if m != 0.0 {
                        for j in 0..n_u {
                            grad[j] += m * s[i * n_u + j];
                        }
                    }
                    row += 2;
                }
            }
        })?;
        Ok((value, grad))
    }

    fn lagrangian_partial(&self, w: &[f64], lambda: &[f64], mu: &[f64], cols: Range<usize>) -> Result<Vec<f64>> {
        let spec = self.spec;
        let (n_x, n_u) = (spec.n_x(), spec.n_u());
        if cols != (0..n_u) {
            let e = self.evaluate(w)?;
            return Ok(e.lagrangian_gradient(lambda, mu).as_slice()[cols].to_vec());
        }
        check_dim("inequality multipliers", spec.n_ineq(), mu.len())?;
        let mut out: Vec<f64> = (0..n_u)
            .map(|j| 2.0 * spec.input_weight * (w[j] - spec.u_e[j]) + mu[2 * j] - mu[2 * j + 1])
            .collect();
        let mut row = 2 * spec.n_w();
        self.sweep(w, n_u, |k, x, s| {
            if k == 0 {
                return;
            }
            if self.state_cost_active(k) {
                for i in 0..n_x {
                    let e = 2.0 * (x[i] - spec.x_sp[i]);
                    for j in 0..n_u {
                        out[j] += e * s[i * n_u + j];
                    }
                }
            }
            if self.state_rows_active(k) {
                for i in 0..n_x {
                    let m = mu[row] - mu[row + 1];
                    if m != 0.0 {
                        for j in 0..n_u {
                            out[j] += m * s[i * n_u + j];
                        }
                    }
                    row += 2;
                }
            }
        })?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step;
    use crate::nlp::lagrangian;
    use rand::{Rng, SeedableRng};

    fn spec_n(n: usize) -> OcpSpec {
        OcpSpec {
            horizon: n,
            ..OcpSpec::cstr_benchmark()
        }
    }

    #[test]
    fn stage_cost_examples() {
        let spec = OcpSpec::cstr_benchmark();
        assert_eq!(spec.stage_cost(&spec.x_sp, &spec.u_e), 0.0);
        let x = [spec.x_sp[0] + 0.1, spec.x_sp[1]];
        assert!((spec.stage_cost(&x, &spec.u_e) - 0.01).abs() < 1e-15);
        assert!((spec.stage_cost(&spec.x_sp, &[spec.u_e[0] + 1.0]) - 1e-4).abs() < 1e-15);
        // the published setpoint is within 2e-5 of the exact one
        let published = [0.3632, 0.6519];
        assert!((spec.stage_cost(&published, &spec.u_e) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn combined_lagrangian_matches_separate_calls() {
        let spec = spec_n(12);
        let p = [0.2, 0.7];
        let nlp = build_nlp(&spec, &p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..spec.n_w()).map(|_| rng.gen_range(0.3..1.2)).collect();
        let mu: Vec<f64> = (0..spec.n_ineq()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (value, grad) = nlp.lagrangian_first(&w, &[], &mu, 1).unwrap();
        let expect = lagrangian(&nlp, &w, &[], &mu).unwrap();
        assert!((value - expect).abs() <= 1e-13 * expect.abs().max(1.0), "{value} vs {expect}");
        let partial = nlp.lagrangian_partial(&w, &[], &mu, 0..1).unwrap();
        assert!((grad[0] - partial[0]).abs() <= 1e-12 * partial[0].abs().max(1.0));
    }

    #[test]
    fn gauss_newton_is_exact_at_the_setpoint() {
        // zero residuals and zero multipliers leave no dynamics curvature
        let spec = spec_n(12);
        let nlp = build_nlp(&spec, &spec.x_sp).unwrap();
        let w = spec.equilibrium_plan();
        let gn = nlp.evaluate(&w).unwrap().gauss_newton.unwrap();
        let exact = nlp.exact_hessian(&w, &[], &vec![0.0; spec.n_ineq()]).unwrap().unwrap();
        assert!((&gn - &exact).amax() < 1e-6 * gn.amax(), "{}", (&gn - &exact).amax());
        let fd = crate::nlp::lagrangian_hessian(&nlp, &w, &[], &vec![0.0; spec.n_ineq()], 1e-5).unwrap();
        assert!((&gn - &fd).amax() < 1e-5 * gn.amax());
    }

    #[test]
    fn exact_hessian_matches_differenced_gradient() {
        let spec = spec_n(6);
        let nlp = build_nlp(&spec, &[0.2, 0.6]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..1.8)).collect();
        let mu: Vec<f64> = (0..spec.n_ineq()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let exact = nlp.exact_hessian(&w, &[], &mu).unwrap().unwrap();
        let fd = crate::nlp::lagrangian_hessian(&nlp, &w, &[], &mu, 1e-5).unwrap();
        let err = (&exact - &fd).amax();
        assert!(err < 1e-6 * (1.0 + fd.amax()), "err {err}\n{exact}\n{fd}");
    }

    #[test]
    fn equilibrium_rollout_is_free() {
        let spec = OcpSpec::cstr_benchmark();
        let (j, traj) = rollout_cost(&spec.equilibrium_plan(), &spec.x_sp, &spec).unwrap();
        assert!(j < 1e-20, "J = {j}");
        assert_eq!(traj.states.len(), 141);
    }

    #[test]
    fn single_step_cost() {
        let spec = spec_n(1);
        let u = spec.u_e[0] + 1.0;
        let (j, _) = rollout_cost(&[u], &spec.x_sp, &spec).unwrap();
        let x1 = step(&spec.model, &spec.x_sp, &[u], &spec.integrator).unwrap();
        let expected = 1e-4 + spec.terminal_cost(&x1);
        assert!((j - expected).abs() < 1e-15);
    }

    #[test]
    fn rollout_is_deterministic() {
        let spec = spec_n(30);
        let w: Vec<f64> = (0..30).map(|k| 0.5 + 0.03 * k as f64).collect();
        let a = rollout_cost(&w, &[0.2, 0.7], &spec).unwrap().0;
        let b = rollout_cost(&w, &[0.2, 0.7], &spec).unwrap().0;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn constraint_count() {
        let spec = spec_n(3);
        assert_eq!(spec.n_ineq(), 2 * 3 + 2 * 2 * 2 + 4);
        let nlp = build_nlp(&spec, &spec.x_sp).unwrap();
        let (_, _, g) = nlp.values(&spec.equilibrium_plan()).unwrap();
        assert_eq!(g.len(), 18);
        assert_eq!(spec.constraint_info(0), ConstraintInfo { kind: ConstraintKind::Input, step: 0, component: 0, upper: true });
        assert_eq!(spec.constraint_info(6).kind, ConstraintKind::State);
        assert_eq!(spec.constraint_info(6).step, 1);
        assert_eq!(spec.constraint_info(13).kind, ConstraintKind::State);
        assert_eq!(spec.constraint_info(13).step, 2);
        assert_eq!(spec.constraint_info(14).kind, ConstraintKind::Terminal);
        assert_eq!(spec.constraint_info(14).step, 3);
    }

    #[test]
    fn equilibrium_is_feasible() {
        let spec = OcpSpec::cstr_benchmark();
        let nlp = build_nlp(&spec, &spec.x_sp).unwrap();
        let (j, _, g) = nlp.values(&spec.equilibrium_plan()).unwrap();
        assert!(j < 1e-20);
        assert!(g.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn rejects_state_outside_box() {
        let spec = OcpSpec::cstr_benchmark();
        assert!(matches!(build_nlp(&spec, &[0.5, 0.6]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cost_is_nonnegative() {
        let spec = spec_n(20);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..2.0)).collect();
            let p = [rng.gen_range(0.0632..0.4632), rng.gen_range(0.4519..0.8519)];
            assert!(rollout_cost(&w, &p, &spec).unwrap().0 >= 0.0);
        }
    }

    #[test]
    fn values_and_evaluate_agree() {
        let spec = spec_n(12);
        let nlp = build_nlp(&spec, &[0.1, 0.8]).unwrap();
        let w: Vec<f64> = (0..12).map(|k| 0.3 + 0.1 * k as f64).collect();
        let (j, _, g) = nlp.values(&w).unwrap();
        let e = nlp.evaluate(&w).unwrap();
        assert!((j - e.cost).abs() < 1e-14);
        for (a, b) in g.iter().zip(e.ineq.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((j - rollout_cost(&w, &[0.1, 0.8], &spec).unwrap().0).abs() < 1e-14);
    }

    #[test]
    fn first_input_partial_matches_full_gradient() {
        let spec = spec_n(15);
        let nlp = build_nlp(&spec, &[0.3, 0.55]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..15).map(|_| rng.gen_range(0.2..1.8)).collect();
        let mu: Vec<f64> = (0..spec.n_ineq()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fast = nlp.lagrangian_partial(&w, &[], &mu, 0..1).unwrap();
        let full = nlp.evaluate(&w).unwrap().lagrangian_gradient(&[], &mu);
        assert!((fast[0] - full[0]).abs() < 1e-12 * (1.0 + full[0].abs()));
        // and against a central difference of the Lagrangian value
        let h = 1e-6;
        let mut wp = w.clone();
        wp[0] += h;
        let mut wm = w.clone();
        wm[0] -= h;
        let fd = (lagrangian(&nlp, &wp, &[], &mu).unwrap() - lagrangian(&nlp, &wm, &[], &mu).unwrap()) / (2.0 * h);
        assert!((fd - fast[0]).abs() < 1e-6 * (1.0 + fd.abs()));
    }
}
