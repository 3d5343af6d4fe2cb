//! Parametric nonlinear programs in standard form
//!
//! ```text
//!     min_w J(w, p)   s.t.  c(w, p) = 0,  g(w, p) <= 0
//! ```
//!
//! with first-order derivative oracles and the Lagrangian
//! `L = J + λ'c + μ'g`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};

/// Values and first derivatives of an NLP at one point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub cost: f64,
    pub grad: DVector<f64>,
    pub eq: DVector<f64>,
    pub eq_jac: DMatrix<f64>,
    pub ineq: DVector<f64>,
    pub ineq_jac: DMatrix<f64>,
    /// Positive semidefinite Gauss–Newton model of the cost Hessian, for
    /// problems whose cost is a sum of squares.
    pub gauss_newton: Option<DMatrix<f64>>,
}

impl Evaluation {
    pub fn lagrangian_gradient(&self, lambda: &[f64], mu: &[f64]) -> DVector<f64> {
        let mut g = self.grad.clone();
        if !lambda.is_empty() {
            g += self.eq_jac.tr_mul(&DVector::from_column_slice(lambda));
        }
        if !mu.is_empty() {
            g += self.ineq_jac.tr_mul(&DVector::from_column_slice(mu));
        }
        g
    }
}

pub trait NlpProblem: Sync {
    fn n_w(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;

    /// `(J, c, g)` at `w`.
    fn values(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>;

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation>;

    /// Partial derivatives of the Lagrangian with respect to `w[cols]`.
    fn lagrangian_partial(&self, w: &[f64], lambda: &[f64], mu: &[f64], cols: Range<usize>) -> Result<Vec<f64>> {
        let e = self.evaluate(w)?;
        let g = e.lagrangian_gradient(lambda, mu);
        Ok(g.as_slice()[cols].to_vec())
    }

    /// Exact Hessian of the Lagrangian, for problems that can provide one.
    fn exact_hessian(&self, _w: &[f64], _lambda: &[f64], _mu: &[f64]) -> Option<Result<DMatrix<f64>>> {
        None
    }

    /// Lagrangian value and its gradient in `w[0..n_u]`.
    fn lagrangian_first(&self, w: &[f64], lambda: &[f64], mu: &[f64], n_u: usize) -> Result<(f64, Vec<f64>)> {
        let (j, c, g) = self.values(w)?;
        check_dim("equality multipliers", c.len(), lambda.len())?;
        check_dim("inequality multipliers", g.len(), mu.len())?;
        let value = j + dot(lambda, &c) + dot(mu, &g);
        Ok((value, self.lagrangian_partial(w, lambda, mu, 0..n_u)?))
    }

    fn cost(&self, w: &[f64]) -> Result<f64> {
        Ok(self.values(w)?.0)
    }
}

impl<T: NlpProblem + ?Sized> NlpProblem for &T {
    fn n_w(&self) -> usize {
        (**self).n_w()
    }
    fn n_eq(&self) -> usize {
        (**self).n_eq()
    }
    fn n_ineq(&self) -> usize {
        (**self).n_ineq()
    }
    fn values(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        (**self).values(w)
    }
    fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        (**self).evaluate(w)
    }
    fn lagrangian_partial(&self, w: &[f64], lambda: &[f64], mu: &[f64], cols: Range<usize>) -> Result<Vec<f64>> {
        (**self).lagrangian_partial(w, lambda, mu, cols)
    }
    fn exact_hessian(&self, w: &[f64], lambda: &[f64], mu: &[f64]) -> Option<Result<DMatrix<f64>>> {
        (**self).exact_hessian(w, lambda, mu)
    }
    fn lagrangian_first(&self, w: &[f64], lambda: &[f64], mu: &[f64], n_u: usize) -> Result<(f64, Vec<f64>)> {
        (**self).lagrangian_first(w, lambda, mu, n_u)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn lagrangian(problem: &dyn NlpProblem, w: &[f64], lambda: &[f64], mu: &[f64]) -> Result<f64> {
    check_dim("decision vector", problem.n_w(), w.len())?;
    check_dim("equality multipliers", problem.n_eq(), lambda.len())?;
    check_dim("inequality multipliers", problem.n_ineq(), mu.len())?;
    let (j, c, g) = problem.values(w)?;
    Ok(j + dot(lambda, &c) + dot(mu, &g))
}

/// Hessian of the Lagrangian projected on the columns of `dirs`
/// (`∇²L · dirs`), by central differences of the exact gradient.
pub fn lagrangian_hessian_times(
    problem: &dyn NlpProblem,
    w: &[f64],
    lambda: &[f64],
    mu: &[f64],
    dirs: &DMatrix<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = problem.n_w();
    let mut out = DMatrix::zeros(n, dirs.ncols());
    let mut wp = w.to_vec();
    let mut wm = w.to_vec();
    for j in 0..dirs.ncols() {
        for i in 0..n {
            wp[i] = w[i] + step * dirs[(i, j)];
            wm[i] = w[i] - step * dirs[(i, j)];
        }
        let gp = problem.evaluate(&wp)?.lagrangian_gradient(lambda, mu);
        let gm = problem.evaluate(&wm)?.lagrangian_gradient(lambda, mu);
        out.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    Ok(out)
}

/// Full Lagrangian Hessian by central differences of the exact gradient, symmetrized.
pub fn lagrangian_hessian(problem: &dyn NlpProblem, w: &[f64], lambda: &[f64], mu: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let n = problem.n_w();
    let h = lagrangian_hessian_times(problem, w, lambda, mu, &DMatrix::identity(n, n), step)?;
    Ok((&h + h.transpose()) * 0.5)
}

type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type MatrixFn = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// NLP assembled from closures; used for synthetic and analytic problems.
pub struct FnNlp {
    n_w: usize,
    cost: ScalarFn,
    grad: VectorFn,
    eq: Option<(usize, VectorFn, MatrixFn)>,
    ineq: Option<(usize, VectorFn, MatrixFn)>,
}

impl FnNlp {
    pub fn new(
        n_w: usize,
        cost: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_w,
            cost: Box::new(cost),
            grad: Box::new(grad),
            eq: None,
            ineq: None,
        }
    }

    pub fn with_eq(
        mut self,
        n: usize,
        values: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        jac: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.eq = Some((n, Box::new(values), Box::new(jac)));
        self
    }

    pub fn with_ineq(
        mut self,
        n: usize,
        values: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        jac: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.ineq = Some((n, Box::new(values), Box::new(jac)));
        self
    }
}

impl NlpProblem for FnNlp {
    fn n_w(&self) -> usize {
        self.n_w
    }
    fn n_eq(&self) -> usize {
        self.eq.as_ref().map_or(0, |e| e.0)
    }
    fn n_ineq(&self) -> usize {
        self.ineq.as_ref().map_or(0, |e| e.0)
    }

    fn values(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        check_dim("decision vector", self.n_w, w.len())?;
        let c = self.eq.as_ref().map_or_else(Vec::new, |e| (e.1)(w));
        let g = self.ineq.as_ref().map_or_else(Vec::new, |e| (e.1)(w));
        Ok(((self.cost)(w), c, g))
    }

    fn evaluate(&self, w: &[f64]) -> Result<Evaluation> {
        let (cost, c, g) = self.values(w)?;
        let n = self.n_w;
        Ok(Evaluation {
            cost,
            grad: DVector::from_vec((self.grad)(w)),
            eq: DVector::from_vec(c),
            eq_jac: self.eq.as_ref().map_or_else(|| DMatrix::zeros(0, n), |e| (e.2)(w)),
            ineq: DVector::from_vec(g),
            ineq_jac: self.ineq.as_ref().map_or_else(|| DMatrix::zeros(0, n), |e| (e.2)(w)),
            gauss_newton: None,
        })
    }
}
