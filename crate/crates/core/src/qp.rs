//! Dense strictly convex QP solver (Goldfarb–Idnani dual active-set method).
//!
//! ```text
//!     minimize    1/2 x' H x + c' x
//!     subject to  A_eq x  = b_eq
//!                 A_in x <= b_in
//! ```
//!
//! Multipliers follow the Lagrangian `f + λ'(A_eq x - b_eq) + μ'(A_in x - b_in)`
//! so that `H x + c + A_eq' λ + A_in' μ = 0` and `μ >= 0` at the solution.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    NotPositiveDefinite,
    Infeasible,
    /// Equality constraints are linearly dependent.
    DependentEqualities,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// Indices of inequality rows in the final active set.
    pub active: Vec<usize>,
    pub objective: f64,
}

/// Row-major copy of constraint rows, `a[i * n..(i + 1) * n]` is row `i`.
struct Rows {
    n: usize,
    data: Vec<f64>,
}

impl Rows {
    fn from_matrix(m: &DMatrix<f64>, sign: f64) -> Self {
        let (rows, n) = m.shape();
        let mut data = vec![0.0; rows * n];
        for j in 0..n {
            for i in 0..rows {
                data[i * n + j] = sign * m[(i, j)];
            }
        }
        Self { n, data }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn hypot(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

struct Factor {
    n: usize,
    /// J = L^{-T} row-major, rotated as constraints enter and leave.
    j: Vec<f64>,
    /// Upper-triangular R, row-major n × n.
    r: Vec<f64>,
    r_norm: f64,
}

impl Factor {
    fn jt(&self, np: &[f64], d: &mut [f64]) {
        let n = self.n;
        for (i, di) in d.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..n {
                s += self.j[k * n + i] * np[k];
            }
            *di = s;
        }
    }

    fn z(&self, d: &[f64], iq: usize, z: &mut [f64]) {
        let n = self.n;
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &self.j[i * n..(i + 1) * n];
            *zi = dot(&row[iq..], &d[iq..]);
        }
    }

    fn r_solve(&self, d: &[f64], iq: usize, r: &mut [f64]) {
        let n = self.n;
        for i in (0..iq).rev() {
            let mut s = 0.0;
            for k in i + 1..iq {
                s += self.r[i * n + k] * r[k];
            }
            r[i] = (d[i] - s) / self.r[i * n + i];
        }
    }

    /// Appends column `d` to R, zeroing `d[iq+1..]` by Givens rotations on J.
    fn add(&mut self, d: &mut [f64], iq: &mut usize) -> bool {
        let n = self.n;
        for jj in (*iq + 1..n).rev() {
            let mut cc = d[jj - 1];
            let mut ss = d[jj];
            let h = hypot(cc, ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[k * n + jj - 1];
                let t2 = self.j[k * n + jj];
                let a = t1 * cc + t2 * ss;
                self.j[k * n + jj - 1] = a;
                self.j[k * n + jj] = xny * (t1 + a) - t2;
            }
        }
        *iq += 1;
        for i in 0..*iq {
            self.r[i * n + *iq - 1] = d[i];
        }
        let diag = d[*iq - 1].abs();
        if diag <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Removes active position `qq`, restoring the triangular structure.
    fn remove(&mut self, qq: usize, iq: &mut usize, active: &mut [isize], u: &mut [f64]) {
        let n = self.n;
        for i in qq..*iq - 1 {
            active[i] = active[i + 1];
            u[i] = u[i + 1];
            for k in 0..n {
                self.r[k * n + i] = self.r[k * n + i + 1];
            }
        }
        active[*iq - 1] = active[*iq];
        u[*iq - 1] = u[*iq];
        active[*iq] = 0;
        u[*iq] = 0.0;
        for k in 0..*iq {
            self.r[k * n + *iq - 1] = 0.0;
        }
        *iq -= 1;
        if *iq == 0 {
            return;
        }
        for jj in qq..*iq {
            let mut cc = self.r[jj * n + jj];
            let mut ss = self.r[(jj + 1) * n + jj];
            let h = hypot(cc, ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1) * n + jj] = 0.0;
            if cc < 0.0 {
                self.r[jj * n + jj] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[jj * n + jj] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..*iq {
                let t1 = self.r[jj * n + k];
                let t2 = self.r[(jj + 1) * n + k];
                let a = t1 * cc + t2 * ss;
                self.r[jj * n + k] = a;
                self.r[(jj + 1) * n + k] = xny * (t1 + a) - t2;
            }
            for k in 0..n {
                let t1 = self.j[k * n + jj];
                let t2 = self.j[k * n + jj + 1];
                let a = t1 * cc + t2 * ss;
                self.j[k * n + jj] = a;
                self.j[k * n + jj + 1] = xny * (a + t1) - t2;
            }
        }
    }
}

pub fn solve_qp(
    h: &DMatrix<f64>,
    c: &[f64],
    a_eq: &DMatrix<f64>,
    b_eq: &[f64],
    a_in: &DMatrix<f64>,
    b_in: &[f64],
) -> Result<QpSolution, QpError> {
    let n = c.len();
    let p = b_eq.len();
    let m = b_in.len();
    debug_assert_eq!(h.shape(), (n, n));
    debug_assert_eq!(a_eq.shape(), (p, n));
    debug_assert_eq!(a_in.shape(), (m, n));

    let chol = nalgebra::Cholesky::new(h.clone()).ok_or(QpError::NotPositiveDefinite)?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut fac = Factor {
        n,
        j: vec![0.0; n * n],
        r: vec![0.0; n * n],
        r_norm: 1.0,
    };
    for i in 0..n {
        for k in 0..n {
            fac.j[i * n + k] = l_inv[(k, i)];
        }
    }

    let mut x: Vec<f64> = {
        let cv = nalgebra::DVector::from_column_slice(c);
        let sol = chol.solve(&cv);
        sol.iter().map(|v| -v).collect()
    };
    let mut f = 0.5 * dot(c, &x);

    // Equalities: rows as normals with s = n'x - b (must vanish).
    let ce = Rows::from_matrix(a_eq, 1.0);
    // Inequalities as n'x + b >= 0 with n = -a.
    let ci = Rows::from_matrix(a_in, -1.0);
    let ci_scale: Vec<f64> = (0..m).map(|i| dot(ci.row(i), ci.row(i)).sqrt().max(1e-300)).collect();

    let cap = n + p + 1;
    let mut active: Vec<isize> = vec![0; cap];
    let mut u = vec![0.0; cap];
    let mut d = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut r = vec![0.0; cap];
    let mut iq = 0usize;

    for i in 0..p {
        let np = ce.row(i);
        fac.jt(np, &mut d);
        fac.z(&d, iq, &mut z);
        fac.r_solve(&d, iq, &mut r);
        let zn = dot(&z, np);
        let t2 = if dot(&z, &z).abs() > f64::EPSILON { (b_eq[i] - dot(np, &x)) / zn } else { 0.0 };
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += t2 * zi;
        }
        u[iq] = t2;
        for k in 0..iq {
            u[k] -= t2 * r[k];
        }
        f += 0.5 * t2 * t2 * zn;
        active[i] = -(i as isize) - 1;
        if !fac.add(&mut d, &mut iq) {
            return Err(QpError::DependentEqualities);
        }
    }

    let mut inactive: Vec<bool> = vec![true; m];
    let mut excluded: Vec<bool> = vec![false; m];
    let mut s = vec![0.0; m];
    let feas_tol = |i: usize| 1e-12 * (1.0 + b_in[i].abs());
    let max_iter = 20 * (n + m + 10);
    let mut iter = 0usize;

    'outer: loop {
        iter += 1;
        if iter > max_iter {
            return Err(QpError::IterationLimit);
        }
        for &a in &active[p..iq] {
            inactive[a as usize] = false;
        }
        for i in 0..m {
            s[i] = dot(ci.row(i), &x) + b_in[i];
        }
        excluded.iter_mut().for_each(|e| *e = false);
        let u_old: Vec<f64> = u.clone();
        let a_old: Vec<isize> = active.clone();
        let x_old = x.clone();

        'select: loop {
            // most violated (normalized) inactive constraint
            let mut ip = usize::MAX;
            let mut worst = 0.0;
            for i in 0..m {
                if inactive[i] && !excluded[i] && s[i] < -feas_tol(i) {
                    let v = s[i] / ci_scale[i];
                    if v < worst {
                        worst = v;
                        ip = i;
                    }
                }
            }
            if ip == usize::MAX {
                break 'outer;
            }
            let np = ci.row(ip).to_vec();
            u[iq] = 0.0;
            active[iq] = ip as isize;

            loop {
                iter += 1;
                if iter > max_iter {
                    return Err(QpError::IterationLimit);
                }
                fac.jt(&np, &mut d);
                fac.z(&d, iq, &mut z);
                fac.r_solve(&d, iq, &mut r);

                let mut t1 = f64::INFINITY;
                let mut l = usize::MAX;
                for k in p..iq {
                    if r[k] > 0.0 {
                        let ratio = u[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            l = active[k] as usize;
                        }
                    }
                }
                let zz = dot(&z, &z);
                let zn = dot(&z, &np);
                let t2 = if zz > f64::EPSILON * f64::EPSILON && zn > 0.0 { -s[ip] / zn } else { f64::INFINITY };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(QpError::Infeasible);
                }
                if !t2.is_finite() {
                    // dual step only
                    for k in 0..iq {
                        u[k] -= t * r[k];
                    }
                    u[iq] += t;
                    inactive[l] = true;
                    let qq = (p..iq).find(|&k| active[k] == l as isize).unwrap();
                    fac.remove(qq, &mut iq, &mut active, &mut u);
                    continue;
                }
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += t * zi;
                }
                f += t * zn * (0.5 * t + u[iq]);
                for k in 0..iq {
                    u[k] -= t * r[k];
                }
                u[iq] += t;
                if t2 <= t1 {
                    if !fac.add(&mut d, &mut iq) {
                        // degenerate: restore and try another constraint
                        excluded[ip] = true;
                        let qq = iq - 1;
                        fac.remove(qq, &mut iq, &mut active, &mut u);
                        inactive.iter_mut().for_each(|v| *v = true);
                        for k in p..iq {
                            active[k] = a_old[k];
                            u[k] = u_old[k];
                            inactive[active[k] as usize] = false;
                        }
                        x.copy_from_slice(&x_old);
                        for i in 0..m {
                            s[i] = dot(ci.row(i), &x) + b_in[i];
                        }
                        continue 'select;
                    }
                    inactive[ip] = false;
                    continue 'outer;
                }
                // partial step: drop the blocking constraint
                inactive[l] = true;
                let qq = (p..iq).find(|&k| active[k] == l as isize).unwrap();
                fac.remove(qq, &mut iq, &mut active, &mut u);
                s[ip] = dot(&np, &x) + b_in[ip];
            }
        }
    }

    let mut lambda = vec![0.0; p];
    let mut mu = vec![0.0; m];
    let mut act = Vec::new();
    for k in 0..iq {
        let a = active[k];
        if a < 0 {
            lambda[(-a - 1) as usize] = -u[k];
        } else {
            mu[a as usize] = u[k].max(0.0);
            act.push(a as usize);
        }
    }
    act.sort_unstable();
    let _ = f;
    let hx = h * nalgebra::DVector::from_column_slice(&x);
    let objective = 0.5 * dot(hx.as_slice(), &x) + dot(c, &x);
    Ok(QpSolution {
        x,
        lambda,
        mu,
        active: act,
        objective,
    })
}
