//! Damped SQP solver returning certified KKT points.
//!
//! Each iteration solves a convex QP model built from the exact Lagrangian
//! Hessian when the problem supplies one (convexified, with a
//! Levenberg–Marquardt shift adapted from the model/merit agreement), or
//! from Gauss–Newton or damped BFGS curvature otherwise. Steps are accepted
//! on the ℓ1 exact-penalty merit with a second-order correction. When the
//! linearized constraints are inconsistent the QP is relaxed with a single
//! elastic slack, which drives the iterates towards minimal constraint
//! violation; stalling there is reported as infeasibility.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nlp::{Evaluation, NlpProblem};
use crate::qp::{solve_qp, QpError, QpSolution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianApprox {
    /// Exact Lagrangian Hessian when the problem provides it, then
    /// Gauss–Newton, then BFGS.
    Auto,
    GaussNewton,
    Bfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub tol_act: f64,
    pub tol_mu: f64,
    pub tol_comp: f64,
    pub max_iter: usize,
    pub hessian: HessianApprox,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-6,
            tol_feas: 1e-8,
            tol_act: 1e-6,
            tol_mu: 1e-6,
            tol_comp: 1e-8,
            max_iter: 200,
            hessian: HessianApprox::Auto,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveFlag {
    Succeeded,
    Infeasible,
    MaxIter,
    NumericalFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveStatus {
    pub flag: SolveFlag,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub complementarity: f64,
    pub message: String,
}

impl SolveStatus {
    pub fn succeeded(&self) -> bool {
        self.flag == SolveFlag::Succeeded
    }
}

/// Primal-dual point `(w*, λ*, μ*)` with its active set.
#[derive(Clone, Debug, PartialEq)]
pub struct KktPoint {
    pub w_star: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub active_set: Vec<usize>,
    pub j_star: f64,
    pub kkt_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
    /// Rows that are active with a vanishing multiplier (strict complementarity fails).
    pub sc_violations: Vec<usize>,
}

pub fn detect_active_set(g: &[f64], mu: &[f64], cfg: &SolverConfig) -> ActiveSet {
    let mut out = ActiveSet::default();
    for (i, (gi, mi)) in g.iter().zip(mu).enumerate() {
        let tight = gi.abs() <= cfg.tol_act;
        if tight || *mi >= cfg.tol_mu {
            out.indices.push(i);
        }
        if tight && *mi <= cfg.tol_mu {
            out.sc_violations.push(i);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Residuals {
    kkt: f64,
    violation: f64,
    complementarity: f64,
}

fn residuals(e: &Evaluation, lambda: &[f64], mu: &[f64], cfg: &SolverConfig) -> Residuals {
    let stat = e.lagrangian_gradient(lambda, mu).amax();
    let act = detect_active_set(e.ineq.as_slice(), mu, cfg);
    let g_act = act.indices.iter().map(|&i| e.ineq[i].abs()).fold(0.0, f64::max);
    let c_max = e.eq.amax();
    let violation = e.ineq.iter().fold(c_max, |m, g| m.max(*g));
    let complementarity = e.ineq.iter().zip(mu).map(|(g, m)| (g * m).abs()).fold(0.0, f64::max);
    Residuals {
        kkt: stat.max(c_max).max(g_act),
        violation: violation.max(0.0),
        complementarity,
    }
}

/// `‖[∇_w L; c; g_A]‖∞` at `(w, λ, μ)`.
pub fn kkt_residual(problem: &dyn NlpProblem, w: &[f64], lambda: &[f64], mu: &[f64], cfg: &SolverConfig) -> Result<f64> {
    let e = problem.evaluate(w)?;
    Ok(residuals(&e, lambda, mu, cfg).kkt)
}

/// Checks every KKT invariant of `point` against `problem`.
pub fn certify(problem: &dyn NlpProblem, point: &KktPoint, cfg: &SolverConfig) -> Result<bool> {
    let e = problem.evaluate(&point.w_star)?;
    let r = residuals(&e, &point.lambda, &point.mu, cfg);
    Ok(r.kkt <= cfg.tol_kkt
        && r.violation <= cfg.tol_feas
        && r.complementarity <= cfg.tol_comp
        && point.mu.iter().all(|m| *m >= 0.0))
}

fn l1_violation(eq: &[f64], ineq: &[f64]) -> f64 {
    eq.iter().map(|c| c.abs()).sum::<f64>() + ineq.iter().map(|g| g.max(0.0)).sum::<f64>()
}

fn max_violation(eq: &[f64], ineq: &[f64]) -> f64 {
    eq.iter().map(|c| c.abs()).chain(ineq.iter().copied()).fold(0.0, f64::max)
}

/// Constraint violation measured in the norm matching the step: ℓ1 for
/// regular steps, ℓ∞ for elastic ones (a single slack bounds every row).
fn merit_violation(eq: &[f64], ineq: &[f64], elastic: bool) -> f64 {
    if elastic {
        max_violation(eq, ineq)
    } else {
        l1_violation(eq, ineq)
    }
}

fn linearized_violation(e: &Evaluation, d: &DVector<f64>, elastic: bool) -> f64 {
    let c = &e.eq + &e.eq_jac * d;
    let g = &e.ineq + &e.ineq_jac * d;
    merit_violation(c.as_slice(), g.as_slice(), elastic)
}

struct Step {
    d: DVector<f64>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    /// Elastic slack; positive when the linearization was inconsistent.
    slack: f64,
}

fn regularized_qp(h: &DMatrix<f64>, e: &Evaluation) -> std::result::Result<QpSolution, QpError> {
    let neg_eq: Vec<f64> = e.eq.iter().map(|v| -v).collect();
    let neg_in: Vec<f64> = e.ineq.iter().map(|v| -v).collect();
    let mut h = h.clone();
    let scale = h.diagonal().amax().max(1e-12);
    let mut delta = 0.0;
    for _ in 0..8 {
        match solve_qp(&h, e.grad.as_slice(), &e.eq_jac, &neg_eq, &e.ineq_jac, &neg_in) {
            Err(QpError::NotPositiveDefinite) => {
                let next = if delta == 0.0 { 1e-10 * scale } else { delta * 100.0 };
                for i in 0..h.nrows() {
                    h[(i, i)] += next - delta;
                }
                delta = next;
            }
            other => return other,
        }
    }
    Err(QpError::NotPositiveDefinite)
}

/// QP with one elastic slack `t >= 0` relaxing every constraint, weight `penalty`.
fn elastic_qp(h: &DMatrix<f64>, e: &Evaluation, penalty: f64) -> std::result::Result<Step, QpError> {
    let n = e.grad.len();
    let (m_e, m_i) = (e.eq.len(), e.ineq.len());
    let rows = 2 * m_e + m_i + 1;
    let mut he = DMatrix::zeros(n + 1, n + 1);
    he.view_mut((0, 0), (n, n)).copy_from(h);
    let scale = h.diagonal().amax().max(1e-12);
    for i in 0..n {
        he[(i, i)] += 1e-10 * scale;
    }
    he[(n, n)] = penalty;
    let mut c = e.grad.as_slice().to_vec();
    c.push(penalty);
    let mut a = DMatrix::zeros(rows, n + 1);
    let mut b = vec![0.0; rows];
    for i in 0..m_i {
        a.view_mut((i, 0), (1, n)).copy_from(&e.ineq_jac.row(i));
        a[(i, n)] = -1.0;
        b[i] = -e.ineq[i];
    }
    for i in 0..m_e {
        let r = m_i + 2 * i;
        a.view_mut((r, 0), (1, n)).copy_from(&e.eq_jac.row(i));
        a[(r, n)] = -1.0;
        b[r] = -e.eq[i];
        a.view_mut((r + 1, 0), (1, n)).copy_from(&(-e.eq_jac.row(i)));
        a[(r + 1, n)] = -1.0;
        b[r + 1] = e.eq[i];
    }
    a[(rows - 1, n)] = -1.0;
    let sol = solve_qp(&he, &c, &DMatrix::zeros(0, n + 1), &[], &a, &b)?;
    let lambda = (0..m_e).map(|i| sol.mu[m_i + 2 * i] - sol.mu[m_i + 2 * i + 1]).collect();
    Ok(Step {
        d: DVector::from_column_slice(&sol.x[..n]),
        lambda,
        mu: sol.mu[..m_i].to_vec(),
        slack: sol.x[n].max(0.0),
    })
}

/// Reflects negative eigenvalues and lifts tiny ones so the QP model is convex.
fn convexify(h: DMatrix<f64>) -> DMatrix<f64> {
    let h = (&h + h.transpose()) * 0.5;
    if h.clone().cholesky().is_some() {
        return h;
    }
    let eig = h.clone().symmetric_eigen();
    let floor = 1e-13 * eig.eigenvalues.amax().max(1e-12);
    let vals = eig.eigenvalues.map(|v| v.abs().max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 1e-300) {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if !(sr > 1e-300) {
        return;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

struct Fail {
    flag: SolveFlag,
    message: String,
}

pub fn solve(problem: &dyn NlpProblem, w0: &[f64], cfg: &SolverConfig) -> (KktPoint, SolveStatus) {
    let mut w = w0.to_vec();
    let mut lambda = vec![0.0; problem.n_eq()];
    let mut mu = vec![0.0; problem.n_ineq()];
    let mut res = Residuals {
        kkt: f64::INFINITY,
        violation: f64::INFINITY,
        complementarity: f64::INFINITY,
    };
    let mut j = f64::NAN;
    let mut iterations = 0;
    let outcome = sqp_loop(problem, cfg, &mut w, &mut lambda, &mut mu, &mut res, &mut j, &mut iterations);
    let (flag, message) = match outcome {
        Ok(()) => (SolveFlag::Succeeded, String::from("converged")),
        Err(f) => (f.flag, f.message),
    };
    let active_set = problem
        .values(&w)
        .map(|(_, _, g)| detect_active_set(&g, &mu, cfg).indices)
        .unwrap_or_default();
    (
        KktPoint {
            w_star: w,
            lambda,
            mu,
            active_set,
            j_star: j,
            kkt_residual: res.kkt,
        },
        SolveStatus {
            flag,
            iterations,
            kkt_residual: res.kkt,
            max_violation: res.violation,
            complementarity: res.complementarity,
            message,
        },
    )
}

#[allow(clippy::too_many_arguments)]
const PENALTY_MAX: f64 = 1e6;

fn sqp_loop(
    problem: &dyn NlpProblem,
    cfg: &SolverConfig,
    w: &mut Vec<f64>,
    lambda: &mut Vec<f64>,
    mu: &mut Vec<f64>,
    res: &mut Residuals,
    j_out: &mut f64,
    iterations: &mut usize,
) -> std::result::Result<(), Fail> {
    let numerical = |message: String| Fail {
        flag: SolveFlag::NumericalFailure,
        message,
    };
    if w.len() != problem.n_w() || w.iter().any(|v| !v.is_finite()) {
        return Err(numerical("initial guess must be finite with the problem dimension".into()));
    }
    let n = problem.n_w();
    let mut penalty: f64 = 1.0;
    let mut bfgs: Option<DMatrix<f64>> = None;
    let mut previous: Option<(Evaluation, DVector<f64>)> = None;
    let mut elastic_run = 0usize;
    let mut best_violation = f64::INFINITY;
    // Marquardt damping H + σ diag(H), steered by the ratio of actual to
    // predicted merit reduction
    let mut sigma = 0.0f64;

    for iter in 0..cfg.max_iter {
        *iterations = iter + 1;
        let e = problem.evaluate(w).map_err(|err| numerical(err.to_string()))?;
        *j_out = e.cost;

        // multipliers of an elastic step do not weight a meaningful curvature
        let exact = match cfg.hessian {
            HessianApprox::Auto if elastic_run == 0 => problem.exact_hessian(w, lambda, mu),
            _ => None,
        };
        let exact = match exact {
            Some(r) => {
                let mut h = r.map_err(|err| numerical(err.to_string()))?;
                // curvature along strongly active rows does not affect steps on
                // the active face; penalize it so the free subspace survives
                let weight = h.diagonal().amax().max(1.0);
                for (i, m) in mu.iter().enumerate() {
                    if *m > cfg.tol_mu {
                        let a = e.ineq_jac.row(i);
                        h += a.transpose() * a * weight;
                    }
                }
                for (i, l) in lambda.iter().enumerate() {
                    if *l != 0.0 {
                        let a = e.eq_jac.row(i);
                        h += a.transpose() * a * weight;
                    }
                }
                Some(convexify(h))
            }
            None => None,
        };
        let quasi_newton = exact.is_none() && (cfg.hessian == HessianApprox::Bfgs || e.gauss_newton.is_none());
        if quasi_newton {
            let b = bfgs.get_or_insert_with(|| DMatrix::identity(n, n));
            if let Some((prev, s)) = previous.take() {
                let y = e.lagrangian_gradient(lambda, mu) - prev.lagrangian_gradient(lambda, mu);
                damped_bfgs_update(b, &s, &y);
            }
        }
        let h = match exact {
            Some(h) => h,
            None if !quasi_newton => e.gauss_newton.clone().unwrap(),
            None => bfgs.clone().unwrap(),
        };
        let diag_floor = 1e-8 * h.diagonal().amax().max(1e-12);
        let scaling: Vec<f64> = h.diagonal().iter().map(|v| v.max(diag_floor)).collect();
        let mut accepted: Option<Vec<f64>> = None;
        let mut last: Option<(DVector<f64>, f64, bool)> = None;
        for attempt in 0..12 {
            let mut hd = h.clone();
            for i in 0..n {
                hd[(i, i)] += sigma * scaling[i];
            }
            let elastic_weight = (10.0 * penalty).max(1e3);
            let step = match regularized_qp(&hd, &e) {
                Ok(sol) => Step {
                    d: DVector::from_vec(sol.x),
                    lambda: sol.lambda,
                    mu: sol.mu,
                    slack: 0.0,
                },
                Err(QpError::Infeasible) | Err(QpError::DependentEqualities) | Err(QpError::IterationLimit) => {
                    elastic_qp(&hd, &e, elastic_weight).map_err(|err| numerical(format!("elastic QP failed: {err:?}")))?
                }
                Err(err) => return Err(numerical(format!("QP failed: {err:?}"))),
            };
            *lambda = step.lambda.clone();
            *mu = step.mu.clone();
            *res = residuals(&e, lambda, mu, cfg);
            let elastic = step.slack > 0.0;
            if !elastic && res.kkt <= cfg.tol_kkt && res.violation <= cfg.tol_feas && res.complementarity <= cfg.tol_comp {
                return Ok(());
            }

            let max_violation = res.violation;
            if attempt == 0 {
                if elastic {
                    elastic_run += 1;
                    let stalled = step.d.amax() <= 1e-10 * (1.0 + w.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                    if elastic_run == 1 {
                        best_violation = max_violation;
                    }
                    let window_done = elastic_run % 15 == 0;
                    if max_violation > cfg.tol_feas * 1e3
                        && (stalled || (window_done && max_violation > 0.9 * best_violation))
                    {
                        return Err(Fail {
                            flag: SolveFlag::Infeasible,
                            message: format!("linearized constraints inconsistent; violation stalled at {max_violation:.3e}"),
                        });
                    }
                    if window_done {
                        best_violation = max_violation;
                    }
                } else {
                    elastic_run = 0;
                }
            }

            let merit_penalty = if elastic {
                elastic_weight
            } else {
                let mult_max = lambda.iter().chain(mu.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
                // multipliers from a poorly damped step can be wild; bound their pull
                if penalty < 1.5 * mult_max {
                    penalty = (2.0 * mult_max).min(PENALTY_MAX.max(penalty));
                }
                penalty
            };
            let d = step.d;
            let violation = merit_violation(e.eq.as_slice(), e.ineq.as_slice(), elastic);
            let phi0 = e.cost + merit_penalty * violation;
            let lin = linearized_violation(&e, &d, elastic);
            let predicted = -(e.grad.dot(&d) + 0.5 * d.dot(&(&h * &d))) + merit_penalty * (violation - lin);
            let trial: Vec<f64> = w.iter().zip(d.iter()).map(|(a, b)| a + b).collect();
            let mut ratio = f64::NEG_INFINITY;
            let mut trial_values = None;
            if let Ok((jt, ct, gt)) = problem.values(&trial) {
                let phi = jt + merit_penalty * merit_violation(&ct, &gt, elastic);
                if phi.is_finite() && predicted > 0.0 {
                    // changes below the rounding level of the merit count as agreement
                    let noise = 10.0 * f64::EPSILON * phi0.abs().max(1e-300);
                    ratio = if predicted <= noise && phi - phi0 <= noise {
                        1.0
                    } else {
                        (phi0 - phi + noise) / predicted
                    };
                }
                trial_values = Some((ct, gt));
            }
            log::trace!(
                "sqp {iter}.{attempt}: J {:.6e} kkt {:.2e} viol {:.2e} comp {:.2e} |d| {:.2e} ratio {ratio:.2e} sigma {sigma:.1e} slack {:.1e} nu {merit_penalty:.1e}",
                e.cost,
                res.kkt,
                res.violation,
                res.complementarity,
                d.amax(),
                step.slack
            );
            if ratio >= 1e-4 {
                // Nielsen's update: shrink gently on good agreement, grow on poor
                let shrink = (1.0 - (2.0 * ratio.min(1.0) - 1.0).powi(3)).max(1.0 / 3.0);
                sigma = if ratio < 0.25 { (sigma * 2.0).max(1e-6) } else { sigma * shrink };
                if sigma < 1e-9 {
                    sigma = 0.0;
                }
                accepted = Some(trial);
                break;
            }
            // a few backtracking cuts keep the direction before damping it
            if predicted > 0.0 {
                let mut alpha = 0.5;
                while alpha >= 0.1 {
                    let trial: Vec<f64> = w.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
                    if let Ok((jt, ct, gt)) = problem.values(&trial) {
                        let phi = jt + merit_penalty * merit_violation(&ct, &gt, elastic);
                        if phi.is_finite() && phi0 - phi >= 1e-4 * alpha * predicted {
                            accepted = Some(trial);
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if accepted.is_some() {
                    sigma = (sigma * 4.0).max(1e-6);
                    break;
                }
            }
            if attempt == 0 && !elastic {
                // second-order correction against the Maratos effect
                if let Some((ct, gt)) = &trial_values {
                    if let Some(corr) = second_order_correction(w, &hd, &e, &d, ct, gt) {
                        if let Ok((js, cs, gs)) = problem.values(&corr) {
                            let phi = js + merit_penalty * l1_violation(&cs, &gs);
                            if phi.is_finite() && predicted > 0.0 && (phi0 - phi) >= 1e-4 * predicted {
                                accepted = Some(corr);
                                break;
                            }
                        }
                    }
                }
            }
            sigma = if sigma == 0.0 { 1e-6 } else { sigma * 10.0 };
            last = Some((d, merit_penalty, elastic));
        }

        if accepted.is_none() {
            // backtrack along the most damped direction
            if let Some((d, merit_penalty, elastic)) = &last {
                let violation = merit_violation(e.eq.as_slice(), e.ineq.as_slice(), *elastic);
                let phi0 = e.cost + merit_penalty * violation;
                let slope = (e.grad.dot(d) + merit_penalty * (linearized_violation(&e, d, *elastic) - violation)).min(0.0);
                let mut alpha = 0.5;
                while alpha > 1e-10 {
                    let trial: Vec<f64> = w.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
                    if let Ok((jt, ct, gt)) = problem.values(&trial) {
                        let phi = jt + merit_penalty * merit_violation(&ct, &gt, *elastic);
                        if phi.is_finite() && phi < phi0 + 1e-4 * alpha * slope {
                            accepted = Some(trial);
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
            }
        }
        match accepted {
            Some(next) => {
                if quasi_newton {
                    let s = DVector::from_iterator(n, next.iter().zip(w.iter()).map(|(a, b)| a - b));
                    previous = Some((e, s));
                }
                *w = next;
            }
            None => {
                if elastic_run > 0 && res.violation > cfg.tol_feas * 1e3 {
                    return Err(Fail {
                        flag: SolveFlag::Infeasible,
                        message: format!("no progress on constraint violation {:.3e}", res.violation),
                    });
                }
                return Err(numerical(format!(
                    "no acceptable step (kkt {:.3e}, violation {:.3e})",
                    res.kkt, res.violation
                )));
            }
        }
    }
    if let Ok(e) = problem.evaluate(w) {
        *j_out = e.cost;
        *res = residuals(&e, lambda, mu, cfg);
    }
    Err(Fail {
        flag: SolveFlag::MaxIter,
        message: format!("iteration limit {} reached", cfg.max_iter),
    })
}

fn second_order_correction(
    w: &[f64],
    h: &DMatrix<f64>,
    e: &Evaluation,
    d: &DVector<f64>,
    c_trial: &[f64],
    g_trial: &[f64],
) -> Option<Vec<f64>> {
    let mut shifted = e.clone();
    let jd_eq = &e.eq_jac * d;
    let jd_in = &e.ineq_jac * d;
    for i in 0..shifted.eq.len() {
        shifted.eq[i] = c_trial[i] - jd_eq[i];
    }
    for i in 0..shifted.ineq.len() {
        shifted.ineq[i] = g_trial[i] - jd_in[i];
    }
    regularized_qp(h, &shifted)
        .ok()
        .map(|sol| w.iter().zip(&sol.x).map(|(a, b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::FnNlp;

    fn bound_qp() -> FnNlp {
        FnNlp::new(1, |w| (w[0] - 1.0).powi(2), |w| vec![2.0 * (w[0] - 1.0)])
            .with_ineq(1, |w| vec![w[0]], |_| DMatrix::from_element(1, 1, 1.0))
    }

    #[test]
    fn analytic_bound_constrained() {
        let cfg = SolverConfig::default();
        let (kkt, status) = solve(&bound_qp(), &[0.7], &cfg);
        assert!(status.succeeded(), "{status:?}");
        assert!(kkt.w_star[0].abs() < 1e-9);
        assert!((kkt.mu[0] - 2.0).abs() < 1e-8);
        assert_eq!(kkt.active_set, vec![0]);
    }

    #[test]
    fn rosenbrock() {
        let p = FnNlp::new(
            2,
            |w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2),
            |w| {
                vec![
                    -400.0 * w[0] * (w[1] - w[0] * w[0]) - 2.0 * (1.0 - w[0]),
                    200.0 * (w[1] - w[0] * w[0]),
                ]
            },
        );
        let (kkt, status) = solve(&p, &[-1.2, 1.0], &SolverConfig::default());
        assert!(status.succeeded(), "{status:?}");
        assert!((kkt.w_star[0] - 1.0).abs() < 1e-5 && (kkt.w_star[1] - 1.0).abs() < 1e-5);
        assert!(status.kkt_residual <= 1e-6);
    }

    #[test]
    fn equality_constrained() {
        // min x^2 + 2y^2 + z^2  s.t. x + y + z = 1, x*y = 0.1
        let p = FnNlp::new(
            3,
            |w| w[0] * w[0] + 2.0 * w[1] * w[1] + w[2] * w[2],
            |w| vec![2.0 * w[0], 4.0 * w[1], 2.0 * w[2]],
        )
        .with_eq(
            2,
            |w| vec![w[0] + w[1] + w[2] - 1.0, w[0] * w[1] - 0.1],
            |w| DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, w[1], w[0], 0.0]),
        );
        let cfg = SolverConfig::default();
        let (kkt, status) = solve(&p, &[0.5, 0.5, 0.0], &cfg);
        assert!(status.succeeded(), "{status:?}");
        assert!(certify(&p, &kkt, &cfg).unwrap());
        let w = &kkt.w_star;
        assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-8);
        assert!((w[0] * w[1] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn infeasible_problem_is_flagged() {
        // w <= -1 and w >= 1
        let p = FnNlp::new(1, |w| w[0] * w[0], |w| vec![2.0 * w[0]])
            .with_ineq(2, |w| vec![w[0] + 1.0, 1.0 - w[0]], |_| DMatrix::from_row_slice(2, 1, &[1.0, -1.0]));
        let (_, status) = solve(&p, &[0.3], &SolverConfig::default());
        assert_eq!(status.flag, SolveFlag::Infeasible, "{status:?}");
    }

    #[test]
    fn zero_iterations_is_max_iter() {
        let cfg = SolverConfig {
            max_iter: 0,
            ..SolverConfig::default()
        };
        let (_, status) = solve(&bound_qp(), &[0.7], &cfg);
        assert_eq!(status.flag, SolveFlag::MaxIter);
    }

    #[test]
    fn non_finite_start_fails() {
        let (_, status) = solve(&bound_qp(), &[f64::NAN], &SolverConfig::default());
        assert_eq!(status.flag, SolveFlag::NumericalFailure);
    }

    #[test]
    fn residual_examples() {
        let cfg = SolverConfig::default();
        let p = bound_qp();
        assert!((kkt_residual(&p, &[-0.1], &[], &[2.0], &cfg).unwrap() - 0.2).abs() < 1e-14);
        assert!(kkt_residual(&p, &[0.0], &[], &[2.0], &cfg).unwrap() < 1e-15);
        let quad = FnNlp::new(2, |w| w[0] * w[0] + w[1] * w[1], |w| vec![2.0 * w[0], 2.0 * w[1]]);
        assert_eq!(kkt_residual(&quad, &[0.0, 0.0], &[], &[], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn active_set_rules() {
        let cfg = SolverConfig::default();
        let a = detect_active_set(&[-1e-9, -0.5], &[2.0, 0.0], &cfg);
        assert_eq!(a.indices, vec![0]);
        assert!(a.sc_violations.is_empty());
        assert!(detect_active_set(&[-0.5], &[0.0], &cfg).indices.is_empty());
        let d = detect_active_set(&[-1e-9], &[1e-9], &cfg);
        assert_eq!(d.indices, vec![0]);
        assert_eq!(d.sc_violations, vec![0]);
    }
}
