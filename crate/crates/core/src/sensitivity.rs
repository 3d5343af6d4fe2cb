//! Lagrangian gap, first-input curvature and local Lipschitz estimates.
//!
//! The quadratic model of the gap is `ΔL(u*+Δu) ≈ ½ Δuᵀ L_uu Δu` with
//! `L_uu` the curvature of the Lagrangian in the first input. The linear
//! term vanishes at a KKT point.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nlp::{lagrangian_hessian_times, NlpProblem};
use crate::solver::{detect_active_set, KktPoint, SolverConfig};

pub use crate::nlp::lagrangian;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMode {
    /// `(u0, u0)` block of the Lagrangian Hessian, remaining inputs frozen.
    Direct,
    /// Reduced Hessian with constrained variables eliminated through the
    /// active constraints (implicit-function theorem).
    Ift,
}

impl std::fmt::Display for ReductionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReductionMode::Direct => "direct",
            ReductionMode::Ift => "ift",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    /// Row-major `n_u × n_u`.
    pub l_uu: Vec<f64>,
    pub n_u: usize,
    pub active_set: Vec<usize>,
    pub hessian_norm: f64,
    pub mode: ReductionMode,
}

impl SensitivityRecord {
    pub fn from_matrix(l_uu: &DMatrix<f64>, active_set: Vec<usize>, mode: ReductionMode) -> Self {
        let sym = (l_uu + l_uu.transpose()) * 0.5;
        Self {
            l_uu: sym.transpose().as_slice().to_vec(),
            n_u: sym.nrows(),
            active_set,
            hessian_norm: spectral_norm(&sym),
            mode,
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_u, self.n_u, &self.l_uu)
    }

    /// `duᵀ L_uu du`.
    pub fn quadratic_form(&self, du: &[f64]) -> f64 {
        let n = self.n_u;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += du[i] * self.l_uu[i * n + j] * du[j];
            }
        }
        acc
    }

    /// Predicted Lagrangian gap `½ duᵀ L_uu du`.
    pub fn model_gap(&self, du: &[f64]) -> f64 {
        0.5 * self.quadratic_form(du)
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.amax()
}

/// `max_i ‖L_uu(p_i)‖`.
pub fn gamma(records: &[SensitivityRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("gamma needs at least one sensitivity record".into()));
    }
    Ok(records.iter().map(|r| r.hessian_norm).fold(0.0, f64::max))
}

fn with_first_input(w_star: &[f64], u: &[f64]) -> Vec<f64> {
    let mut w = w_star.to_vec();
    w[..u.len()].copy_from_slice(u);
    w
}

/// `L([u, w̄*], λ*, μ*) − L(w*, λ*, μ*)`.
pub fn delta_lagrangian(problem: &dyn NlpProblem, w_star: &[f64], lambda: &[f64], mu: &[f64], u: &[f64]) -> Result<f64> {
    if u.len() > w_star.len() {
        return Err(Error::Dimension {
            what: "first input",
            expected: w_star.len(),
            got: u.len(),
        });
    }
    let base = lagrangian(problem, w_star, lambda, mu)?;
    let moved = lagrangian(problem, &with_first_input(w_star, u), lambda, mu)?;
    Ok(moved - base)
}

/// Central-difference step for curvature. On the CSTR the Lagrangian stops
/// being quadratic in the first input beyond about 1e-6, so the usual 1e-5
/// biases `L_uu` by several percent.
const CURVATURE_STEP: f64 = 1e-7;

/// `∂L/∂u0` and `∂²L/∂u0²` at `[u, w̄*]`, the latter by central differences
/// of the exact partial gradient.
pub fn first_input_derivatives(
    problem: &dyn NlpProblem,
    w_star: &[f64],
    lambda: &[f64],
    mu: &[f64],
    u: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n_u = u.len();
    let w = with_first_input(w_star, u);
    let grad = problem.lagrangian_partial(&w, lambda, mu, 0..n_u)?;
    let mut hess = DMatrix::zeros(n_u, n_u);
    for j in 0..n_u {
        let h = CURVATURE_STEP * (1.0 + u[j].abs());
        let mut wp = w.clone();
        let mut wm = w.clone();
        wp[j] += h;
        wm[j] -= h;
        let gp = problem.lagrangian_partial(&wp, lambda, mu, 0..n_u)?;
        let gm = problem.lagrangian_partial(&wm, lambda, mu, 0..n_u)?;
        for i in 0..n_u {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    Ok((grad, (&hess + hess.transpose()) * 0.5))
}

/// Curvature of the Lagrangian in the first input at a KKT point.
pub fn reduced_hessian(
    problem: &dyn NlpProblem,
    kkt: &KktPoint,
    n_u: usize,
    mode: ReductionMode,
    cfg: &SolverConfig,
) -> Result<SensitivityRecord> {
    check_dim("decision vector", problem.n_w(), kkt.w_star.len())?;
    if n_u == 0 || n_u > problem.n_w() {
        return Err(Error::InvalidArgument(format!("first-input size {n_u} does not fit n_w = {}", problem.n_w())));
    }
    let (_, _, g) = problem.values(&kkt.w_star)?;
    let active = detect_active_set(&g, &kkt.mu, cfg);
    if !active.sc_violations.is_empty() {
        log::warn!("strict complementarity fails on {} active rows", active.sc_violations.len());
    }
    let u = &kkt.w_star[..n_u];
    let (grad, direct) = first_input_derivatives(problem, &kkt.w_star, &kkt.lambda, &kkt.mu, u)?;
    let first_order = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if first_order > 1e-5 {
        return Err(Error::Numerical(format!(
            "first-order Lagrangian term {first_order:.3e} is not negligible; not a KKT point"
        )));
    }
    let l_uu = match mode {
        ReductionMode::Direct => direct,
        ReductionMode::Ift => match ift_hessian(problem, kkt, n_u, &active.indices)? {
            Some(h) => h,
            None => {
                log::warn!("active constraint block is singular; falling back to the direct reduction");
                return Ok(SensitivityRecord::from_matrix(&direct, active.indices, ReductionMode::Direct));
            }
        },
    };
    let record = SensitivityRecord::from_matrix(&l_uu, active.indices, mode);
    let min_eig = record.matrix().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-8 * record.hessian_norm.max(1e-12) {
        log::warn!("L_uu has a negative eigenvalue {min_eig:.3e}; second-order sufficiency looks violated");
    }
    Ok(record)
}

/// `Zᵀ ∇²L Z` where `Z` maps first-input moves to moves that keep the active
/// constraints satisfied to first order; `None` when the constraint block
/// cannot be inverted.
fn ift_hessian(problem: &dyn NlpProblem, kkt: &KktPoint, n_u: usize, active: &[usize]) -> Result<Option<DMatrix<f64>>> {
    let n_w = problem.n_w();
    let e = problem.evaluate(&kkt.w_star)?;
    let rows: Vec<_> = (0..e.eq.len())
        .map(|i| e.eq_jac.row(i).into_owned())
        .chain(active.iter().map(|&i| e.ineq_jac.row(i).into_owned()))
        .collect();
    let n_c = rows.len();
    let mut z = DMatrix::zeros(n_w, n_u);
    for j in 0..n_u {
        z[(j, j)] = 1.0;
    }
    if n_c > 0 {
        if n_c > n_w - n_u {
            return Ok(None);
        }
        let c = DMatrix::from_rows(&rows);
        let c_rest = c.columns(n_u, n_w - n_u).into_owned();
        // pick the best conditioned subset of constrained variables
        let qr = c_rest.clone().col_piv_qr();
        let r = qr.r();
        let scale = (0..n_c).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        if scale == 0.0 || r[(n_c - 1, n_c - 1)].abs() <= 1e-10 * scale {
            return Ok(None);
        }
        let perm = qr.p();
        let mut order: Vec<usize> = (0..n_w - n_u).collect();
        let mut ident = DMatrix::<f64>::identity(n_w - n_u, n_w - n_u);
        perm.permute_columns(&mut ident);
        for (k, slot) in order.iter_mut().enumerate() {
            *slot = (0..n_w - n_u).find(|&i| ident[(i, k)] == 1.0).unwrap_or(k);
        }
        let sel = &order[..n_c];
        let c_sel = DMatrix::from_fn(n_c, n_c, |i, k| c_rest[(i, sel[k])]);
        let c_u = c.columns(0, n_u).into_owned();
        let Some(inv) = c_sel.try_inverse() else {
            return Ok(None);
        };
        let dz = -(inv * c_u);
        for (k, &col) in sel.iter().enumerate() {
            for j in 0..n_u {
                z[(n_u + col, j)] = dz[(k, j)];
            }
        }
    }
    let hz = lagrangian_hessian_times(problem, &kkt.w_star, &kkt.lambda, &kkt.mu, &z, CURVATURE_STEP)?;
    let h = z.transpose() * hz;
    Ok(Some((&h + h.transpose()) * 0.5))
}

/// Sampled local constants at one KKT point: the Lipschitz constant of the
/// first-input Hessian (`M_H`) and of the first-input gradient (`M_J`),
/// over random pairs inside the ball of radius `radius` around `u*`.
pub fn local_constants(
    problem: &dyn NlpProblem,
    w_star: &[f64],
    lambda: &[f64],
    mu: &[f64],
    n_u: usize,
    radius: f64,
    pairs: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let u_star = &w_star[..n_u];
    let draw = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        // uniform in the ball
        loop {
            let v: Vec<f64> = (0..n_u).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let n2: f64 = v.iter().map(|a| a * a).sum();
            if n2 <= 1.0 {
                return u_star.iter().zip(&v).map(|(a, b)| a + radius * b).collect();
            }
        }
    };
    let (mut m_h, mut m_j) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let a = draw(rng);
        let b = draw(rng);
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if dist <= 1e-12 {
            continue;
        }
        let (ga, ha) = first_input_derivatives(problem, w_star, lambda, mu, &a)?;
        let (gb, hb) = first_input_derivatives(problem, w_star, lambda, mu, &b)?;
        m_h = m_h.max(spectral_norm(&(ha - hb)) / dist);
        let dg = DVector::from_vec(ga) - DVector::from_vec(gb);
        m_j = m_j.max(dg.norm() / dist);
    }
    Ok((m_h, m_j))
}

/// Largest radius in `radii` for which every clipped first-input move of
/// that size along ± each axis leaves the set of tight or violated rows
/// equal to `active`.
pub fn active_set_radius(
    problem: &dyn NlpProblem,
    w_star: &[f64],
    active: &[usize],
    n_u: usize,
    u_bounds: Option<(&[f64], &[f64])>,
    radii: &[f64],
    cfg: &SolverConfig,
) -> Result<f64> {
    let mut best = 0.0f64;
    let mut sorted = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    for r in sorted {
        let mut same = true;
        'dirs: for j in 0..n_u {
            for sign in [-1.0, 1.0] {
                let mut u = w_star[..n_u].to_vec();
                u[j] += sign * r;
                if let Some((lo, hi)) = u_bounds {
                    u[j] = u[j].clamp(lo[j], hi[j]);
                }
                let (_, _, g) = problem.values(&with_first_input(w_star, &u))?;
                let tight: Vec<usize> = (0..g.len()).filter(|&i| g[i] >= -cfg.tol_act).collect();
                if tight != active {
                    same = false;
                    break 'dirs;
                }
            }
        }
        if !same {
            break;
        }
        best = r;
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub m_hs: f64,
    pub m_js: f64,
    pub epsilon: f64,
    pub rho: f64,
    /// Radius of the perturbation ball the constants were sampled in.
    pub radius: f64,
}

/// Suprema of the per-sample constants. `points` yields, per sample, the
/// problem and its primal-dual solution.
pub fn estimate_bounds<'a, P: NlpProblem + 'a>(
    points: impl IntoIterator<Item = (P, &'a [f64], &'a [f64], &'a [f64], f64)>,
    n_u: usize,
    radius: f64,
    pairs: usize,
    rng: &mut impl Rng,
) -> Result<BoundEstimate> {
    let mut out = BoundEstimate {
        m_hs: 0.0,
        m_js: 0.0,
        epsilon: 0.0,
        rho: f64::INFINITY,
        radius,
    };
    let mut any = false;
    for (i, (problem, w_star, lambda, mu, hessian_norm)) in points.into_iter().enumerate() {
        let (m_h, m_j) = local_constants(&problem, w_star, lambda, mu, n_u, radius, pairs, rng).map_err(|e| e.at_sample(i))?;
        out.m_hs = out.m_hs.max(m_h);
        out.m_js = out.m_js.max(m_j).max(hessian_norm);
        any = true;
    }
    if !any {
        out.rho = 0.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::FnNlp;
    use crate::solver::solve;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bound_qp() -> FnNlp {
        FnNlp::new(1, |w| (w[0] - 1.0).powi(2), |w| vec![2.0 * (w[0] - 1.0)])
            .with_ineq(1, |w| vec![w[0]], |_| DMatrix::from_element(1, 1, 1.0))
    }

    #[test]
    fn lagrangian_examples() {
        let p = bound_qp();
        assert_eq!(lagrangian(&p, &[0.3], &[], &[0.0]).unwrap(), p.cost(&[0.3]).unwrap());
        assert_eq!(lagrangian(&p, &[0.0], &[], &[2.0]).unwrap(), 1.0);
    }

    #[test]
    fn delta_lagrangian_examples() {
        let p = bound_qp();
        assert_eq!(delta_lagrangian(&p, &[0.0], &[], &[2.0], &[0.0]).unwrap(), 0.0);
        let d = delta_lagrangian(&p, &[0.0], &[], &[2.0], &[0.1]).unwrap();
        assert!((d - 0.01).abs() < 1e-15, "{d}");
    }

    fn quadratic(h: DMatrix<f64>) -> FnNlp {
        let h2 = h.clone();
        FnNlp::new(
            h.nrows(),
            move |w| {
                let v = DVector::from_column_slice(w);
                0.5 * v.dot(&(&h * &v))
            },
            move |w| (&h2 * DVector::from_column_slice(w)).as_slice().to_vec(),
        )
    }

    #[test]
    fn unconstrained_quadratic_gives_its_hessian() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let p = quadratic(h.clone());
        let cfg = SolverConfig::default();
        let (kkt, status) = solve(&p, &[1.0, -1.0], &cfg);
        assert!(status.succeeded());
        for mode in [ReductionMode::Direct, ReductionMode::Ift] {
            let rec = reduced_hessian(&p, &kkt, 2, mode, &cfg).unwrap();
            assert!((rec.matrix() - &h).amax() < 1e-8);
            assert_eq!(rec.mode, mode);
        }
    }

    #[test]
    fn ift_eliminates_an_active_equality() {
        // min x² + y², x + y = 0  → moving x forces y = -x, curvature 4
        let p = FnNlp::new(2, |w| w[0] * w[0] + w[1] * w[1], |w| vec![2.0 * w[0], 2.0 * w[1]])
            .with_eq(1, |w| vec![w[0] + w[1]], |_| DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        let cfg = SolverConfig::default();
        let (kkt, status) = solve(&p, &[0.3, 0.1], &cfg);
        assert!(status.succeeded());
        let direct = reduced_hessian(&p, &kkt, 1, ReductionMode::Direct, &cfg).unwrap();
        let ift = reduced_hessian(&p, &kkt, 1, ReductionMode::Ift, &cfg).unwrap();
        assert!((direct.l_uu[0] - 2.0).abs() < 1e-8);
        assert!((ift.l_uu[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn ift_falls_back_when_constraints_cannot_be_solved() {
        // the only constraint involves the first input alone
        let p = FnNlp::new(2, |w| w[0] * w[0] + w[1] * w[1], |w| vec![2.0 * w[0], 2.0 * w[1]])
            .with_eq(1, |w| vec![w[0] - 0.5], |_| DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let cfg = SolverConfig::default();
        let (kkt, status) = solve(&p, &[0.0, 0.0], &cfg);
        assert!(status.succeeded());
        let rec = reduced_hessian(&p, &kkt, 1, ReductionMode::Ift, &cfg).unwrap();
        assert_eq!(rec.mode, ReductionMode::Direct);
    }

    #[test]
    fn gamma_examples() {
        let rec = |v: f64| SensitivityRecord::from_matrix(&DMatrix::from_element(1, 1, v), vec![], ReductionMode::Direct);
        assert_eq!(gamma(&[rec(2.0)]).unwrap(), 2.0);
        assert_eq!(gamma(&[rec(1.0), rec(5.0), rec(3.0)]).unwrap(), 5.0);
        assert!(gamma(&[]).is_err());
    }

    #[test]
    fn quadratic_form_is_bounded_by_spectral_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let rec = SensitivityRecord::from_matrix(&(&a + a.transpose()), vec![], ReductionMode::Direct);
            let du: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n2: f64 = du.iter().map(|v| v * v).sum();
            assert!(rec.quadratic_form(&du).abs() <= rec.hessian_norm * n2 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn constants_of_quadratic_and_linear_gradient_problems() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let p = quadratic(a.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m_h, m_j) = local_constants(&p, &[0.0, 0.0], &[], &[], 2, 0.1, 50, &mut rng).unwrap();
        assert!(m_h < 1e-6, "{m_h}");
        assert!(m_j <= spectral_norm(&a) * (1.0 + 1e-9));
        assert!(m_j > 0.5 * spectral_norm(&a));
        let est = estimate_bounds([(quadratic(a.clone()), &[0.0, 0.0][..], &[][..], &[][..], spectral_norm(&a))], 2, 0.1, 50, &mut rng).unwrap();
        assert!(est.m_hs < 1e-6);
        assert!((est.m_js - spectral_norm(&a)).abs() < 1e-9);
    }
}
