//! Dense primal-dual interior point method for convex programs with a
//! separable objective, linear equalities and linear inequalities:
//!
//! ```text
//! min f(x)  s.t.  A x = b,  G x <= h
//! ```

use nalgebra::{DMatrix, DVector};

/// Residual below which a polished point counts as converged.
const POLISH_TOL: f64 = 1e-9;

/// Separable convex objective.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn hessian_diag(&self, x: &[f64], out: &mut [f64]);
    /// Largest step length keeping `x + a dx` inside the open domain; infinite when unbounded.
    /// May be shortened where curvature blows up near the edge.
    fn max_step(&self, x: &[f64], dx: &[f64]) -> f64;
}

/// Linear objective `c . x`.
pub struct Linear(pub Vec<f64>);

impl Objective for Linear {
    fn value(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(c, x)| c * x).sum()
    }
    fn gradient(&self, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
    fn hessian_diag(&self, _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    fn max_step(&self, _: &[f64], _: &[f64]) -> f64 {
        f64::INFINITY
    }
}

pub struct Program<'a> {
    pub objective: &'a dyn Objective,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            tol: 1e-11,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    /// Inequality multipliers (nonnegative).
    pub z: DVector<f64>,
    /// Inequality slacks `h - G x`.
    pub s: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub polished: bool,
    pub residuals: Residuals,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Residuals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a = 1.0f64;
    for (x, d) in v.iter().zip(dv.iter()) {
        if *d < 0.0 {
            a = a.min(-x / d);
        }
    }
    a
}

impl<'a> Program<'a> {
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        self.objective.gradient(x.as_slice(), g.as_mut_slice());
        g
    }

    fn hess(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = DVector::zeros(x.len());
        self.objective.hessian_diag(x.as_slice(), h.as_mut_slice());
        h
    }

    /// KKT residuals with stationarity scaled by the gradient size.
    pub fn residuals(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
        s: &DVector<f64>,
    ) -> Residuals {
        let gf = self.grad(x);
        let rd = &gf + self.a.transpose() * y + self.g.transpose() * z;
        let rp = &self.a * x - &self.b;
        let ri = &self.g * x + s - &self.h;
        let m = s.len().max(1) as f64;
        // Row-wise scaling so rows with very different magnitudes do not mask each other.
        let rel = |r: &DVector<f64>, scale: &DVector<f64>| {
            r.iter()
                .zip(scale.iter())
                .fold(0.0f64, |a, (r, s)| a.max(r.abs() / (1.0 + s.abs())))
        };
        Residuals {
            stationarity: rel(&rd, &gf),
            primal_eq: rel(&rp, &self.b),
            primal_ineq: rel(&ri, &self.h),
            complementarity: s.dot(z) / m,
        }
    }

    /// Mehrotra predictor-corrector iterations from `x0`, which must lie in the
    /// objective's domain. Rows of `G` already satisfied at `x0` keep zero residual.
    pub fn solve(&self, x0: &[f64], opts: Options) -> Solution {
        let n = x0.len();
        let me = self.a.nrows();
        let mi = self.g.nrows();
        let mut x = DVector::from_column_slice(x0);
        let mut y = DVector::zeros(me);
        let gx = &self.g * &x;
        let mut s = DVector::from_fn(mi, |i, _| {
            let v = self.h[i] - gx[i];
            if v > 1e-8 {
                v
            } else {
                1.0
            }
        });
        // Start every complementarity product at O(1), however loose the row.
        let mut z = s.map(|v| 1.0 / v.max(1.0));
        let mut iterations = 0;
        let mut converged = false;
        let mut stalls = 0;
        let mut last_alpha = 1.0;
        let mut best: Option<(f64, usize, [DVector<f64>; 4])> = None;
        for it in 0..opts.max_iter {
            iterations = it;
            let res = self.residuals(&x, &y, &z, &s);
            if res.max() <= opts.tol {
                converged = true;
                break;
            }
            match &best {
                Some((r, _, _)) if *r <= res.max() => {}
                _ => best = Some((res.max(), it, [x.clone(), y.clone(), z.clone(), s.clone()])),
            }
            // Give up once the best iterate has not improved for a while.
            if let Some((_, at, _)) = &best {
                if it > at + 30 {
                    break;
                }
            }
            let gf = self.grad(&x);
            let rd = &gf + self.a.transpose() * &y + self.g.transpose() * &z;
            let rp = &self.a * &x - &self.b;
            let ri = &self.g * &x + &s - &self.h;
            let mu = if mi > 0 { s.dot(&z) / mi as f64 } else { 0.0 };
            let hd = self.hess(&x);
            let d = z.component_div(&s);
            let mut kkt = DMatrix::zeros(n + me, n + me);
            {
                let gt_d = self.g.transpose() * DMatrix::from_diagonal(&d);
                let m = &gt_d * &self.g;
                kkt.view_mut((0, 0), (n, n)).copy_from(&m);
                for i in 0..n {
                    kkt[(i, i)] += hd[i];
                }
                kkt.view_mut((0, n), (n, me)).copy_from(&self.a.transpose());
                kkt.view_mut((n, 0), (me, n)).copy_from(&self.a);
                // Tiny relative regularization keeps the factorization defined on flat directions.
                for i in 0..n {
                    kkt[(i, i)] += 1e-14 * (1.0 + kkt[(i, i)].abs());
                }
            }
            let lu = kkt.lu();
            let solve_dir = |rc: &DVector<f64>| -> Option<(
                DVector<f64>,
                DVector<f64>,
                DVector<f64>,
                DVector<f64>,
            )> {
                let t = (rc - z.component_mul(&ri)).component_div(&s);
                let top = -&rd + self.g.transpose() * &t;
                let mut rhs = DVector::zeros(n + me);
                rhs.rows_mut(0, n).copy_from(&top);
                rhs.rows_mut(n, me).copy_from(&(-&rp));
                let sol = lu.solve(&rhs)?;
                let dx = sol.rows(0, n).into_owned();
                let dy = sol.rows(n, me).into_owned();
                let ds = -&ri - &self.g * &dx;
                let dz = (-rc - z.component_mul(&ds)).component_div(&s);
                Some((dx, dy, dz, ds))
            };
            let rc_aff = s.component_mul(&z);
            let Some((_, _, dz_a, ds_a)) = solve_dir(&rc_aff) else {
                break;
            };
            let a_aff = step_to_boundary(&s, &ds_a)
                .min(step_to_boundary(&z, &dz_a))
                .min(1.0);
            let mu_aff = if mi > 0 {
                (&s + a_aff * &ds_a).dot(&(&z + a_aff * &dz_a)) / mi as f64
            } else {
                0.0
            };
            let mut sigma = if mu > 0.0 {
                (mu_aff / mu).powi(3).min(1.0)
            } else {
                0.0
            };
            // After a short step, or when complementarity races ahead of
            // stationarity, recentre before pushing on.
            if last_alpha < 0.1 || mu < 1e-3 * res.stationarity {
                sigma = sigma.max(0.3);
            }
            let target = (sigma * mu).max(0.1 * opts.tol);
            let rc = &rc_aff + ds_a.component_mul(&dz_a) - DVector::from_element(mi, target);
            let Some((dx, dy, dz, ds)) = solve_dir(&rc) else {
                break;
            };
            let a_max = step_to_boundary(&s, &ds).min(step_to_boundary(&z, &dz));
            let a_dom = self.objective.max_step(x.as_slice(), dx.as_slice());
            let mut alpha = (0.995 * a_max).min(0.995 * a_dom).min(1.0);
            if a_max >= 1.0 && a_dom >= 1.0 {
                alpha = 1.0;
            }
            // Keep the objective finite.
            let mut tries = 0;
            while !self
                .objective
                .value((&x + alpha * &dx).as_slice())
                .is_finite()
                && tries < 60
            {
                alpha *= 0.5;
                tries += 1;
            }
            if alpha < 1e-14 {
                stalls += 1;
                if stalls > 3 {
                    break;
                }
            }
            if dx
                .iter()
                .chain(dy.iter())
                .chain(dz.iter())
                .any(|v| !v.is_finite())
            {
                break;
            }
            last_alpha = alpha;
            x += alpha * &dx;
            y += alpha * &dy;
            z += alpha * &dz;
            s += alpha * &ds;
            // Guard against exact zeros from round-off.
            for v in s.iter_mut().chain(z.iter_mut()) {
                if *v <= 0.0 {
                    *v = 1e-300;
                }
            }
            iterations = it + 1;
        }
        let mut residuals = self.residuals(&x, &y, &z, &s);
        if !converged {
            if let Some((r, _, [bx, by, bz, bs])) = best {
                if r < residuals.max() {
                    (x, y, z, s) = (bx, by, bz, bs);
                    residuals = self.residuals(&x, &y, &z, &s);
                }
            }
        }
        converged = converged || residuals.max() <= opts.tol;
        Solution {
            x,
            y,
            z,
            s,
            iterations,
            converged,
            polished: false,
            residuals,
        }
    }

    /// Newton iterations on the KKT system with the active inequalities held as
    /// equalities. Returns the refined solution only if it stays primal and dual
    /// feasible and improves the residuals.
    pub fn polish(&self, sol: &Solution) -> Option<Solution> {
        let n = sol.x.len();
        let me = self.a.nrows();
        let active: Vec<usize> = (0..sol.s.len()).filter(|&i| sol.z[i] > sol.s[i]).collect();
        let ma = active.len();
        let dim = n + me + ma;
        if me + ma > n {
            return None;
        }
        let mut x = sol.x.clone();
        let mut y = sol.y.clone();
        let mut za = DVector::from_fn(ma, |k, _| sol.z[active[k]]);
        for _ in 0..30 {
            let gf = self.grad(&x);
            let hd = self.hess(&x);
            let mut kkt = DMatrix::zeros(dim, dim);
            for i in 0..n {
                kkt[(i, i)] = hd[i];
            }
            kkt.view_mut((0, n), (n, me)).copy_from(&self.a.transpose());
            kkt.view_mut((n, 0), (me, n)).copy_from(&self.a);
            for (k, &row) in active.iter().enumerate() {
                for j in 0..n {
                    let v = self.g[(row, j)];
                    kkt[(j, n + me + k)] = v;
                    kkt[(n + me + k, j)] = v;
                }
            }
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&(-&gf));
            rhs.rows_mut(n, me).copy_from(&(&self.b - &self.a * &x));
            for (k, &row) in active.iter().enumerate() {
                rhs[n + me + k] = self.h[row] - self.g.row(row).dot(&x.transpose());
            }
            let lu = kkt.lu();
            let sol_k = lu.solve(&rhs)?;
            if sol_k.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let dx = sol_k.rows(0, n).into_owned();
            let a_dom = self.objective.max_step(x.as_slice(), dx.as_slice());
            if a_dom < 1.0 {
                return None;
            }
            x += &dx;
            y = sol_k.rows(n, me).into_owned();
            za = sol_k.rows(n + me, ma).into_owned();
            if inf_norm(&dx) <= 1e-15 * (1.0 + inf_norm(&x)) {
                break;
            }
        }
        let mut z = DVector::zeros(sol.z.len());
        for (k, &row) in active.iter().enumerate() {
            z[row] = za[k];
        }
        let s = &self.h - &self.g * &x;
        let zscale = 1.0 + inf_norm(&z);
        if z.iter().any(|v| *v < -1e-9 * zscale) {
            return None;
        }
        if s.iter()
            .zip(self.h.iter())
            .any(|(v, h)| *v < -1e-11 * (1.0 + h.abs()))
        {
            return None;
        }
        let z = z.map(|v| v.max(0.0));
        let s_clip = s.map(|v| v.max(0.0));
        let residuals = self.residuals(&x, &y, &z, &s_clip);
        if residuals.max() > sol.residuals.max().max(1e-12) {
            return None;
        }
        Some(Solution {
            x,
            y,
            z,
            s: s_clip,
            iterations: sol.iterations,
            converged: residuals.max() <= POLISH_TOL,
            polished: true,
            residuals,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad(Vec<f64>);

    impl Objective for Quad {
        fn value(&self, x: &[f64]) -> f64 {
            x.iter()
                .zip(&self.0)
                .map(|(x, c)| 0.5 * (x - c) * (x - c))
                .sum()
        }
        fn gradient(&self, x: &[f64], out: &mut [f64]) {
            for i in 0..x.len() {
                out[i] = x[i] - self.0[i];
            }
        }
        fn hessian_diag(&self, _: &[f64], out: &mut [f64]) {
            out.iter_mut().for_each(|v| *v = 1.0);
        }
        fn max_step(&self, _: &[f64], _: &[f64]) -> f64 {
            f64::INFINITY
        }
    }

    #[test]
    fn projection_onto_simplex_corner() {
        // min 0.5|x - (2, -1)|^2 s.t. x1 + x2 = 1, x >= 0  ->  (1, 0)
        let obj = Quad(vec![2.0, -1.0]);
        let p = Program {
            objective: &obj,
            a: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b: DVector::from_element(1, 1.0),
            g: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]),
            h: DVector::zeros(2),
        };
        let sol = p.solve(&[0.5, 0.5], Options::default());
        assert!(sol.converged);
        assert!((sol.x[0] - 1.0).abs() < 1e-8 && sol.x[1].abs() < 1e-8);
        let pol = p.polish(&sol).expect("polish");
        assert!((pol.x[0] - 1.0).abs() < 1e-14 && pol.x[1].abs() < 1e-14);
        // Multiplier on x2 >= 0 is 2: stationarity x - c + y + G'z = 0.
        assert!((pol.z[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_program() {
        // min -x1 - x2 s.t. x1 + 2 x2 <= 4, 3 x1 + x2 <= 6, x >= 0 -> (1.6, 1.2)
        let obj = Linear(vec![-1.0, -1.0]);
        let p = Program {
            objective: &obj,
            a: DMatrix::zeros(0, 2),
            b: DVector::zeros(0),
            g: DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            h: DVector::from_column_slice(&[4.0, 6.0, 0.0, 0.0]),
        };
        let sol = p.solve(&[0.1, 0.1], Options::default());
        assert!(sol.converged);
        assert!((sol.x[0] - 1.6).abs() < 1e-8 && (sol.x[1] - 1.2).abs() < 1e-8);
    }
}
