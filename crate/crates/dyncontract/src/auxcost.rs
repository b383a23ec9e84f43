//! Static cost minimization: the cheapest flow contract delivering flow utility
//! `nu` to the high type and `nu - delta` to a low type mimicking it.

use thiserror::Error;

use crate::model::CrraNormalization;
use crate::model::{FlowContract, IncomeModel, ModelPrimitives, Preferences, UtilityFamily};

/// High-type flow utility `nu` and utility wedge `delta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxTarget {
    pub nu: f64,
    pub delta: f64,
}

impl AuxTarget {
    pub fn new(nu: f64, delta: f64) -> Self {
        AuxTarget { nu, delta }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxSolution {
    /// Consumption per income level.
    pub zeta: FlowContract,
    /// Utility per income level.
    pub x: Vec<f64>,
    /// Multiplier on the high-type utility constraint.
    pub lambda: f64,
    /// Multiplier on the low-type utility constraint.
    pub mu: f64,
    pub chi: f64,
    /// `(chi_nu, chi_delta) = (lambda - mu, mu)`.
    pub grad: (f64, f64),
    pub interior: bool,
    /// Income indices where utility sits at the floor.
    pub active_corners: Vec<usize>,
    pub iterations: usize,
    /// Largest KKT residual at the returned point.
    pub residual: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuxError {
    #[error("target (nu = {nu}, delta = {delta}) is not attainable")]
    Infeasible { nu: f64, delta: f64 },
    #[error("Newton iteration stopped after {iterations} steps with residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("solution has consumption at the floor for incomes {0:?}; the cross derivative is not defined")]
    Corner(Vec<usize>),
    #[error("closed form requires u(c) = 2 sqrt(c): {0}")]
    WrongFamily(String),
    #[error("brute force supports at most three income levels, got {0}")]
    TooManyLevels(usize),
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 200;

/// Solver for the static cost-minimization problem of one model.
#[derive(Clone, Copy, Debug)]
pub struct AuxCost<'a> {
    prefs: &'a Preferences,
    income: &'a IncomeModel,
}

struct DualPoint {
    x: Vec<f64>,
    free: Vec<bool>,
    value: f64,
    grad: [f64; 2],
    jac: [[f64; 2]; 2],
}

impl<'a> AuxCost<'a> {
    pub fn new(model: &'a ModelPrimitives) -> Self {
        AuxCost {
            prefs: &model.prefs,
            income: &model.income,
        }
    }

    pub fn from_parts(prefs: &'a Preferences, income: &'a IncomeModel) -> Self {
        AuxCost { prefs, income }
    }

    fn floor(&self) -> f64 {
        self.prefs.utility_floor()
    }

    /// Utility range width per income level (infinite when `u` is unbounded above).
    fn width(&self) -> f64 {
        match self.prefs.utility_sup() {
            Some(s) => s - self.floor(),
            None => f64::INFINITY,
        }
    }

    /// Low-type utility attainable for a given high-type utility above the floor,
    /// walking income levels in the given likelihood order.
    fn chain(&self, a: f64, increasing: bool) -> Option<f64> {
        let mut order: Vec<usize> = (0..self.income.len()).collect();
        order.sort_by(|&i, &j| {
            let c = self.income.likelihood[i].total_cmp(&self.income.likelihood[j]);
            if increasing {
                c
            } else {
                c.reverse()
            }
        });
        let w = self.width();
        let mut remaining = a;
        let mut b = 0.0;
        for y in order {
            let cap = w * self.income.p_h[y];
            let take = remaining.min(cap);
            b += take * self.income.likelihood[y];
            remaining -= take;
            if remaining <= 0.0 {
                break;
            }
        }
        (remaining <= 1e-12 * a.abs().max(1.0)).then_some(b)
    }

    fn membership_impl(&self, t: AuxTarget, strict: bool) -> bool {
        let floor = self.floor();
        let a = t.nu - floor;
        let b = t.nu - t.delta - floor;
        if !(a.is_finite() && b.is_finite()) {
            return false;
        }
        let eps = 1e-12 * t.nu.abs().max(1.0);
        if strict {
            if a <= eps {
                return false;
            }
        } else if a < -eps {
            return false;
        }
        let a = a.max(0.0);
        let (lo, hi) = match (self.chain(a, true), self.chain(a, false)) {
            (Some(lo), Some(hi)) => (lo, hi),
            _ => return false,
        };
        if strict {
            if let Some(sup) = self.prefs.utility_sup() {
                if t.nu >= sup || t.nu - t.delta >= sup {
                    return false;
                }
            }
            b > lo + eps && b < hi - eps
        } else {
            b >= lo - eps && b <= hi + eps
        }
    }

    /// Whether some utility profile above the floor delivers the target.
    pub fn membership(&self, t: AuxTarget) -> bool {
        self.membership_impl(t, false)
    }

    /// Whether the target lies in the interior of the attainable set.
    pub fn interior_membership(&self, t: AuxTarget) -> bool {
        self.membership_impl(t, true)
    }

    fn eval(&self, t: AuxTarget, lambda: f64, mu: f64) -> DualPoint {
        let floor = self.floor();
        let n = self.income.len();
        let mut x = vec![0.0; n];
        let mut free = vec![false; n];
        let (mut eh, mut el, mut cost) = (0.0, 0.0, 0.0);
        let mut jac = [[0.0; 2]; 2];
        for y in 0..n {
            let l = self.income.likelihood[y];
            let raw = self.prefs.psi_prime_inv(lambda - mu * l);
            let (xy, is_free) = if raw > floor {
                (raw, true)
            } else {
                (floor, false)
            };
            x[y] = xy;
            free[y] = is_free;
            let (ph, pl) = (self.income.p_h[y], self.income.p_l[y]);
            eh += ph * xy;
            el += pl * xy;
            cost += ph * self.prefs.psi(xy);
            if is_free {
                let w = 1.0 / self.prefs.psi_second(xy);
                jac[0][0] += ph * w;
                jac[0][1] -= pl * w;
                jac[1][1] += pl * l * w;
            }
        }
        jac[1][0] = jac[0][1];
        let target_l = t.nu - t.delta;
        DualPoint {
            value: cost - lambda * (eh - t.nu) + mu * (el - target_l),
            grad: [t.nu - eh, el - target_l],
            x,
            free,
            jac,
        }
    }

    fn residual(&self, p: &DualPoint, lambda: f64, mu: f64) -> f64 {
        let mut r = p.grad[0].abs().max(p.grad[1].abs());
        for y in 0..p.x.len() {
            if p.free[y] {
                let foc = self.prefs.psi_prime(p.x[y]) - lambda + mu * self.income.likelihood[y];
                r = r.max(foc.abs() / lambda.abs().max(1.0));
            }
        }
        r
    }

    /// Damped Newton ascent on the concave dual; returns `(lambda, mu, iterations, residual)`.
    fn newton(
        &self,
        t: AuxTarget,
        start: (f64, f64),
        tol: f64,
        max_iter: usize,
    ) -> Result<(f64, f64, usize), (usize, f64)> {
        let (mut lambda, mut mu) = start;
        let mut p = self.eval(t, lambda, mu);
        let mut res = self.residual(&p, lambda, mu);
        for it in 0..max_iter {
            if res <= tol {
                return Ok((lambda, mu, it));
            }
            let [[a, b], [_, c]] = p.jac;
            let scale = (a.abs() + c.abs()).max(1e-300);
            let mut reg = 0.0;
            let (dl, dm);
            loop {
                let (aa, cc) = (a + reg, c + reg);
                let det = aa * cc - b * b;
                if det.abs() > 1e-14 * scale * scale {
                    dl = (cc * p.grad[0] - b * p.grad[1]) / det;
                    dm = (aa * p.grad[1] - b * p.grad[0]) / det;
                    break;
                }
                reg = if reg == 0.0 {
                    1e-10 * scale.max(1.0)
                } else {
                    reg * 10.0
                };
                if reg > 1e10 {
                    dl = p.grad[0];
                    dm = p.grad[1];
                    break;
                }
            }
            let slope = dl * p.grad[0] + dm * p.grad[1];
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let (nl, nm) = (lambda + step * dl, mu + step * dm);
                let q = self.eval(t, nl, nm);
                let armijo = p.value + 1e-4 * step * slope.max(0.0);
                if q.value.is_finite() && q.value >= armijo - 1e-15 * p.value.abs().max(1.0) {
                    accepted = Some((nl, nm, q));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((nl, nm, q)) => {
                    lambda = nl;
                    mu = nm;
                    p = q;
                    res = self.residual(&p, lambda, mu);
                }
                None => return Err((it, res)),
            }
        }
        if res <= tol {
            Ok((lambda, mu, max_iter))
        } else {
            Err((max_iter, res))
        }
    }

    fn finish(&self, t: AuxTarget, lambda: f64, mu: f64, iterations: usize) -> AuxSolution {
        let p = self.eval(t, lambda, mu);
        let residual = self.residual(&p, lambda, mu);
        let chi = self
            .income
            .p_h
            .iter()
            .zip(&p.x)
            .map(|(ph, x)| ph * self.prefs.psi(*x))
            .sum();
        let active_corners: Vec<usize> = (0..p.x.len()).filter(|&y| !p.free[y]).collect();
        let zeta = FlowContract::new(p.x.iter().map(|x| self.prefs.psi(*x)).collect());
        AuxSolution {
            zeta,
            interior: active_corners.is_empty(),
            active_corners,
            x: p.x,
            lambda,
            mu,
            chi,
            grad: (lambda - mu, mu),
            iterations,
            residual,
        }
    }

    /// Solves the problem to KKT residual `tol`.
    pub fn solve(&self, t: AuxTarget, tol: f64) -> Result<AuxSolution, AuxError> {
        if !self.membership(t) {
            return Err(AuxError::Infeasible {
                nu: t.nu,
                delta: t.delta,
            });
        }
        let start = (self.prefs.psi_prime(t.nu), 0.0);
        match self.newton(t, start, tol, MAX_ITER) {
            Ok((l, m, it)) => Ok(self.finish(t, l, m, it)),
            Err(_) => {
                // Homotopy in the wedge, warm-starting each stage.
                let stages = 16;
                let mut guess = start;
                let mut total = 0;
                for k in 1..=stages {
                    let tk = AuxTarget::new(t.nu, t.delta * k as f64 / stages as f64);
                    let stage_tol = if k == stages { tol } else { tol.max(1e-8) };
                    match self.newton(tk, guess, stage_tol, MAX_ITER) {
                        Ok((l, m, it)) => {
                            guess = (l, m);
                            total += it;
                        }
                        Err((it, residual)) => {
                            return Err(AuxError::NonConvergence {
                                iterations: total + it,
                                residual,
                            })
                        }
                    }
                }
                Ok(self.finish(t, guess.0, guess.1, total))
            }
        }
    }

    pub fn chi(&self, t: AuxTarget) -> Result<f64, AuxError> {
        Ok(self.solve(t, DEFAULT_TOL)?.chi)
    }

    pub fn chi_gradient(&self, t: AuxTarget) -> Result<(f64, f64), AuxError> {
        Ok(self.solve(t, DEFAULT_TOL)?.grad)
    }

    /// Mixed second derivative of the cost in `(nu, delta)` at an interior solution.
    pub fn chi_cross(&self, t: AuxTarget) -> Result<f64, AuxError> {
        let s = self.solve(t, DEFAULT_TOL)?;
        if !s.interior {
            return Err(AuxError::Corner(s.active_corners));
        }
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for y in 0..s.x.len() {
            let w = 1.0 / self.prefs.psi_second(s.x[y]);
            let (ph, pl) = (self.income.p_h[y], self.income.p_l[y]);
            a += ph * w;
            b += pl * w;
            c += pl * pl / ph * w;
        }
        Ok((b - a) / (a * c - b * b))
    }

    /// Utility profile pinned by the two constraints when there are two income levels.
    pub fn pinned_binary(&self, t: AuxTarget) -> Option<[f64; 2]> {
        if self.income.len() != 2 {
            return None;
        }
        let (ph, pl) = (&self.income.p_h, &self.income.p_l);
        let d = ph[1] - pl[1];
        Some([t.nu - ph[1] / d * t.delta, t.nu + ph[0] / d * t.delta])
    }

    /// Grid-search upper bound on the cost for at most three income levels.
    pub fn brute_force_chi(&self, t: AuxTarget, resolution: f64) -> Result<f64, AuxError> {
        let n = self.income.len();
        let floor = self.floor();
        let sup = self.prefs.utility_sup().unwrap_or(f64::INFINITY);
        let ok = |x: f64| x >= floor - 1e-12 && x < sup;
        let cost = |x: &[f64]| -> f64 {
            x.iter()
                .zip(&self.income.p_h)
                .map(|(x, p)| p * self.prefs.psi(x.max(floor)))
                .sum()
        };
        let infeasible = AuxError::Infeasible {
            nu: t.nu,
            delta: t.delta,
        };
        match n {
            1 => {
                if t.delta.abs() <= 1e-14 && ok(t.nu) {
                    Ok(cost(&[t.nu]))
                } else {
                    Err(infeasible)
                }
            }
            2 => {
                let x = self.pinned_binary(t).expect("two levels");
                if x.iter().all(|v| ok(*v)) {
                    Ok(cost(&x))
                } else {
                    Err(infeasible)
                }
            }
            3 => {
                let (ph, pl) = (&self.income.p_h, &self.income.p_l);
                let min_ph = ph.iter().cloned().fold(f64::INFINITY, f64::min);
                let x_max = (floor + (t.nu - floor) / min_ph).min(sup);
                let (i, j, k) = (0, 2, 1);
                let det = ph[i] * pl[j] - ph[j] * pl[i];
                let steps = ((x_max - floor) / resolution).ceil().max(1.0) as usize;
                let mut best = f64::INFINITY;
                for s in 0..=steps {
                    let xk = (floor + s as f64 * resolution).min(x_max);
                    let r1 = t.nu - ph[k] * xk;
                    let r2 = t.nu - t.delta - pl[k] * xk;
                    let xi = (r1 * pl[j] - ph[j] * r2) / det;
                    let xj = (ph[i] * r2 - pl[i] * r1) / det;
                    let mut x = [0.0; 3];
                    x[i] = xi;
                    x[j] = xj;
                    x[k] = xk;
                    if x.iter().all(|v| ok(*v)) {
                        best = best.min(cost(&x));
                    }
                }
                if best.is_finite() {
                    Ok(best)
                } else {
                    Err(infeasible)
                }
            }
            _ => Err(AuxError::TooManyLevels(n)),
        }
    }
}

/// Closed-form cost and gradient for `u(c) = 2 sqrt(c)` at interior targets.
pub fn chi_quadratic_oracle(
    model: &ModelPrimitives,
    t: AuxTarget,
) -> Result<(f64, (f64, f64)), AuxError> {
    match model.prefs.family {
        UtilityFamily::Crra {
            rho,
            normalization: CrraNormalization::Power,
        } if rho == 0.5 => {}
        ref other => return Err(AuxError::WrongFamily(format!("{other:?}"))),
    }
    let k = model.income.l2() - 1.0;
    Ok((
        t.nu * t.nu / 4.0 + t.delta * t.delta / (4.0 * k),
        (t.nu / 2.0, t.delta / (2.0 * k)),
    ))
}
