//! Relaxed profit maximization solved as one convex program in utility space,
//! extraction of the flow-utility and distortion dynamics, and numerical
//! checks of the optimality structure.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::auxcost::{AuxCost, AuxTarget, DEFAULT_TOL};
use crate::ipm::{self, Linear, Objective, Program};
use crate::mechanism::{
    all_high, check_csm, check_ctm, decode_signals, firm_profit, format_signals, post_low_variance,
    signal_histories, Mechanism, Profit, ValueTable,
};
use crate::model::{
    CrraNormalization, ModelPrimitives, Preferences, Psi3Sign, Type, UtilityFamily,
};

/// Hard cap on decision variables.
pub const MAX_VARIABLES: usize = 100_000;
/// Largest program the dense linear algebra accepts.
pub const DENSE_LIMIT: usize = 4_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("{variables} decision variables exceed the limit of {limit}")]
    TooLarge { variables: usize, limit: usize },
    #[error(
        "target utilities (V_l = {v_low}, V_h = {v_high}) are infeasible: \
         the smallest achievable uniform constraint violation is {violation:.6e}"
    )]
    Infeasible {
        v_low: f64,
        v_high: f64,
        violation: f64,
    },
    #[error(
        "target utilities (V_l = {v_low}, V_h = {v_high}) lie on the boundary of the \
         feasible set (margin {margin:.3e})"
    )]
    Boundary {
        v_low: f64,
        v_high: f64,
        margin: f64,
    },
    #[error("solver stopped after {iterations} iterations with KKT residual {residual:.3e}")]
    NonConvergence { iterations: usize, residual: f64 },
}

/// Relaxed problem for horizon `T` and target utilities `(V_l, V_h)`.
#[derive(Clone, Debug)]
pub struct RelaxedProblemSpec {
    pub model: ModelPrimitives,
    pub horizon: usize,
    pub v_low: f64,
    pub v_high: f64,
    /// Collapse every subtree after the first `l` report to one constant utility flow.
    pub exploit_low_structure: bool,
}

impl RelaxedProblemSpec {
    pub fn new(model: ModelPrimitives, horizon: usize, v_low: f64, v_high: f64) -> Self {
        RelaxedProblemSpec {
            model,
            horizon,
            v_low,
            v_high,
            exploit_low_structure: true,
        }
    }

    pub fn with_structure(mut self, on: bool) -> Self {
        self.exploit_low_structure = on;
        self
    }

    fn target(&self, th: Type) -> f64 {
        match th {
            Type::Low => self.v_low,
            Type::High => self.v_high,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    /// Interior point stopping tolerance on scaled KKT residuals.
    pub tol: f64,
    pub max_iter: usize,
    /// Active-set Newton refinement after the interior point phase.
    pub polish: bool,
    /// Relative perturbation of the starting consumption levels.
    pub start_shift: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-11,
            max_iter: 300,
            polish: true,
            start_shift: 0.0,
        }
    }
}

/// Solution data at one all-`h` public history.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRecord {
    pub t: usize,
    pub signal_rank: usize,
    pub signals: Vec<usize>,
    /// Utility profile of the `h` contract.
    pub x: Vec<f64>,
    pub nu: f64,
    pub delta: f64,
    /// Flow utility of the full-insurance contract offered to a first `l` report here.
    pub nu_low: f64,
    /// Promise-keeping multiplier, in node-normalized units.
    pub mu: f64,
    /// One-shot incentive multiplier, in node-normalized units.
    pub lambda: f64,
    pub osic_slack: f64,
    /// Largest `|psi'(x(y)) - mu + lambda l(y)|` over incomes above the floor.
    pub foc_residual: f64,
    pub interior: bool,
}

#[derive(Clone, Debug)]
pub struct RelaxedSolution {
    pub model: ModelPrimitives,
    pub horizon: usize,
    pub v_low: f64,
    pub v_high: f64,
    pub exploit_low_structure: bool,
    pub mechanism: Mechanism,
    /// `Pi^R(V)` with initial type weights.
    pub value: f64,
    pub profit: Profit,
    /// All-`h` histories in period-major, signal-rank order.
    pub nodes: Vec<NodeRecord>,
    /// Decision variables in layout order.
    pub utilities: Vec<f64>,
    pub promise_residual: [f64; 2],
    pub kkt: ipm::Residuals,
    /// Strict feasibility margin found by the phase-one program.
    pub feasibility_margin: f64,
    pub interior: bool,
    pub iterations: usize,
    pub polished: bool,
}

impl RelaxedSolution {
    pub fn node(&self, t: usize, s: usize) -> &NodeRecord {
        let offset: usize = (1..t)
            .map(|k| signal_histories(self.model.signals.count, k))
            .sum();
        &self.nodes[offset + s]
    }
}

struct Layout {
    horizon: usize,
    ny: usize,
    ns: usize,
    structure: bool,
    /// Variable index per `(t, s, r, y)`, stored as in `Mechanism`.
    var: Vec<Vec<usize>>,
    n: usize,
    weight: Vec<f64>,
    block: Vec<Type>,
}

fn first_low(t: usize, r: usize) -> Option<usize> {
    (0..t).find(|k| (r >> (t - 1 - k)) & 1 == 0).map(|k| k + 1)
}

impl Layout {
    fn build(model: &ModelPrimitives, horizon: usize, structure: bool) -> Result<Self, SolveError> {
        let ny = model.income.len();
        let ns = model.signals.count;
        let mut count: u128 = 0;
        for t in 1..=horizon {
            let nodes = (ns as u128).pow((t - 1) as u32) << t;
            count += if structure {
                (ns as u128).pow((t - 1) as u32) * (ny as u128 + 1)
            } else {
                nodes * ny as u128
            };
            if count > MAX_VARIABLES as u128 {
                break;
            }
        }
        if count > MAX_VARIABLES as u128 {
            return Err(SolveError::TooLarge {
                variables: count.min(usize::MAX as u128) as usize,
                limit: MAX_VARIABLES,
            });
        }
        if count > DENSE_LIMIT as u128 {
            return Err(SolveError::TooLarge {
                variables: count as usize,
                limit: DENSE_LIMIT,
            });
        }
        let mut var = Vec::with_capacity(horizon);
        let mut n = 0usize;
        let mut block = Vec::new();
        let mut low_var: HashMap<(usize, usize), usize> = HashMap::new();
        for t in 1..=horizon {
            let nsig = signal_histories(ns, t);
            let nrep = 1usize << t;
            let mut v = vec![0usize; nsig * nrep * ny];
            for s in 0..nsig {
                for r in 0..nrep {
                    let o = ((s << t) + r) * ny;
                    let b = Type::from_index(r >> (t - 1));
                    match (structure, first_low(t, r)) {
                        (true, Some(tau)) => {
                            let key = (tau, s / ns.pow((t - tau) as u32));
                            let k = *low_var.entry(key).or_insert_with(|| {
                                block.push(b);
                                n += 1;
                                n - 1
                            });
                            v[o..o + ny].iter_mut().for_each(|e| *e = k);
                        }
                        _ => {
                            for e in &mut v[o..o + ny] {
                                *e = n;
                                block.push(b);
                                n += 1;
                            }
                        }
                    }
                }
            }
            var.push(v);
        }
        let mut layout = Layout {
            horizon,
            ny,
            ns,
            structure,
            var,
            n,
            weight: vec![0.0; n],
            block,
        };
        layout.weights(model);
        Ok(layout)
    }

    fn idx(&self, t: usize, s: usize, r: usize, y: usize) -> usize {
        self.var[t - 1][((s << t) + r) * self.ny + y]
    }

    /// Discounted reach probability of every node given the initial type.
    fn weights(&mut self, model: &ModelPrimitives) {
        let delta = model.delta();
        let mut prob = vec![1.0, 1.0];
        for t in 1..=self.horizon {
            let disc = delta.powi((t - 1) as i32);
            let nsig = signal_histories(self.ns, t);
            let nrep = 1usize << t;
            for s in 0..nsig {
                for r in 0..nrep {
                    let p = prob[(s << t) + r];
                    let th = Type::from_index(r & 1);
                    for y in 0..self.ny {
                        let k = self.idx(t, s, r, y);
                        self.weight[k] += disc * p * model.income.probs(th)[y];
                    }
                }
            }
            if t == self.horizon {
                break;
            }
            let mut next = vec![0.0; signal_histories(self.ns, t + 1) << (t + 1)];
            for s in 0..nsig {
                for r in 0..nrep {
                    let th = Type::from_index(r & 1);
                    for phi in 0..self.ns {
                        for nt in Type::ALL {
                            let sc = s * self.ns + phi;
                            next[(sc << (t + 1)) + 2 * r + nt.index()] = prob[(s << t) + r]
                                * model.signals.probs(th)[phi]
                                * model.types.pi(th, nt);
                        }
                    }
                }
            }
            prob = next;
        }
    }
}

/// Continuation values as dense linear functions of the decision variables.
struct ValueExprs {
    map: HashMap<(usize, usize, usize, Type), Vec<f64>>,
}

impl ValueExprs {
    fn build(model: &ModelPrimitives, lay: &Layout) -> Self {
        let delta = model.delta();
        let mut map: HashMap<(usize, usize, usize, Type), Vec<f64>> = HashMap::new();
        for t in (1..=lay.horizon).rev() {
            let prev: Vec<usize> = if lay.structure {
                vec![all_high(t - 1)]
            } else {
                (0..1usize << (t - 1)).collect()
            };
            for s in 0..signal_histories(lay.ns, t) {
                for &r in &prev {
                    for th in Type::ALL {
                        let rr = 2 * r + th.index();
                        let mut e = vec![0.0; lay.n];
                        if lay.structure && th == Type::Low {
                            let k = lay.idx(t, s, rr, 0);
                            e[k] = model.annuity(t, lay.horizon);
                        } else {
                            let p = model.income.probs(th);
                            for y in 0..lay.ny {
                                e[lay.idx(t, s, rr, y)] += p[y];
                                if t < lay.horizon {
                                    let sc = s * lay.ns + model.signals.map[y];
                                    for nt in Type::ALL {
                                        let c = p[y] * delta * model.types.pi(th, nt);
                                        if c != 0.0 {
                                            let child = &map[&(t + 1, sc, rr, nt)];
                                            for (a, b) in e.iter_mut().zip(child) {
                                                *a += c * b;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        map.insert((t, s, r, th), e);
                    }
                }
            }
        }
        ValueExprs { map }
    }

    fn get(&self, t: usize, s: usize, r: usize, th: Type) -> &[f64] {
        &self.map[&(t, s, r, th)]
    }

    /// Value to a low type of reporting `h` once at `(t, s, r)`.
    fn deviation(
        &self,
        model: &ModelPrimitives,
        lay: &Layout,
        t: usize,
        s: usize,
        r: usize,
    ) -> Vec<f64> {
        let p = &model.income.p_l;
        let delta = model.delta();
        let rr = 2 * r + 1;
        let mut e = vec![0.0; lay.n];
        for y in 0..lay.ny {
            e[lay.idx(t, s, rr, y)] += p[y];
            if t < lay.horizon {
                let sc = s * lay.ns + model.signals.map[y];
                for nt in Type::ALL {
                    let c = p[y] * delta * model.types.pi(Type::Low, nt);
                    if c != 0.0 {
                        for (a, b) in e.iter_mut().zip(self.get(t + 1, sc, rr, nt)) {
                            *a += c * b;
                        }
                    }
                }
            }
        }
        e
    }
}

struct CostObjective<'a> {
    prefs: &'a Preferences,
    weight: &'a [f64],
    lo: f64,
    hi: f64,
}

impl Objective for CostObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        for (w, x) in self.weight.iter().zip(x) {
            if *x < self.lo || *x >= self.hi {
                return f64::NAN;
            }
            if *w != 0.0 {
                v += w * self.prefs.psi(*x);
            }
        }
        v
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = self.weight[i] * self.prefs.psi_prime(x[i]);
        }
    }
    fn hessian_diag(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = self.weight[i] * self.prefs.psi_second(x[i]);
        }
    }
    fn max_step(&self, x: &[f64], dx: &[f64]) -> f64 {
        let mut a = f64::INFINITY;
        for (x, d) in x.iter().zip(dx) {
            if *d < 0.0 && self.lo.is_finite() {
                a = a.min((x - self.lo) / -d);
            } else if *d > 0.0 && self.hi.is_finite() {
                // Cost explodes at the utility ceiling: at most halve the gap per step.
                a = a.min(0.5 * (self.hi - x) / d);
            }
        }
        a
    }
}

struct Assembled {
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// One-shot rows first, then lower bounds.
    g: DMatrix<f64>,
    h: DVector<f64>,
    n_osic: usize,
}

fn assemble(spec: &RelaxedProblemSpec, lay: &Layout, ex: &ValueExprs) -> Assembled {
    let model = &spec.model;
    let n = lay.n;
    let mut a = DMatrix::zeros(2, n);
    for (row, th) in [Type::High, Type::Low].into_iter().enumerate() {
        for (j, c) in ex.get(1, 0, 0, th).iter().enumerate() {
            a[(row, j)] = *c;
        }
    }
    let b = DVector::from_column_slice(&[spec.v_high, spec.v_low]);
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for t in 1..=lay.horizon {
        let r = all_high(t - 1);
        for s in 0..signal_histories(lay.ns, t) {
            let mut e = ex.deviation(model, lay, t, s, r);
            let rhs = if t == 1 {
                spec.v_low
            } else {
                for (a, b) in e.iter_mut().zip(ex.get(t, s, r, Type::Low)) {
                    *a -= b;
                }
                0.0
            };
            rows.push((e, rhs));
        }
    }
    let n_osic = rows.len();
    let floor = model.prefs.utility_floor();
    let m = n_osic + n;
    let mut g = DMatrix::zeros(m, n);
    let mut h = DVector::zeros(m);
    for (i, (e, rhs)) in rows.into_iter().enumerate() {
        for (j, c) in e.into_iter().enumerate() {
            g[(i, j)] = c;
        }
        h[i] = rhs;
    }
    for k in 0..n {
        g[(n_osic + k, k)] = -1.0;
        h[n_osic + k] = -floor;
    }
    Assembled { a, b, g, h, n_osic }
}

fn start_point(spec: &RelaxedProblemSpec, lay: &Layout, shift: f64) -> Vec<f64> {
    let prefs = &spec.model.prefs;
    let a1 = spec.model.annuity(1, lay.horizon);
    let floor = prefs.utility_floor();
    let sup = prefs.utility_sup().unwrap_or(f64::INFINITY);
    let scale = 1.0 + spec.v_low.abs().max(spec.v_high.abs()) / a1;
    (0..lay.n)
        .map(|k| {
            let flat = spec.target(lay.block[k]) / a1;
            let base = if shift == 0.0 {
                flat
            } else {
                let c = prefs
                    .psi(flat.max(floor).min(sup))
                    .max(prefs.consumption_floor());
                prefs.u(c * (shift * (((k % 5) as f64) - 2.0) / 2.0).exp())
            };
            let lo = floor + 1e-3 * scale;
            let hi = if sup.is_finite() {
                sup - 1e-3 * (sup - floor).min(scale)
            } else {
                f64::INFINITY
            };
            base.max(lo).min(hi).max(floor + 1e-6 * scale)
        })
        .collect()
}

/// Phase-one program: minimize `tau` subject to every inequality relaxed by `tau`.
fn phase_one(spec: &RelaxedProblemSpec, asm: &Assembled, x0: &[f64], opts: ipm::Options) -> f64 {
    let n = x0.len();
    let sup = spec.model.prefs.utility_sup();
    let m0 = asm.g.nrows();
    let m = m0 + 1 + if sup.is_some() { n } else { 0 };
    let mut g = DMatrix::zeros(m, n + 1);
    let mut h = DVector::zeros(m);
    g.view_mut((0, 0), (m0, n)).copy_from(&asm.g);
    h.rows_mut(0, m0).copy_from(&asm.h);
    for i in 0..m0 {
        g[(i, n)] = -1.0;
    }
    g[(m0, n)] = -1.0;
    h[m0] = 1.0;
    if let Some(sup) = sup {
        for k in 0..n {
            g[(m0 + 1 + k, k)] = 1.0;
            g[(m0 + 1 + k, n)] = -1.0;
            h[m0 + 1 + k] = sup;
        }
    }
    let mut a = DMatrix::zeros(asm.a.nrows(), n + 1);
    a.view_mut((0, 0), (asm.a.nrows(), n)).copy_from(&asm.a);
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    let obj = Linear(c);
    let mut start = x0.to_vec();
    let gx = &asm.g * DVector::from_column_slice(x0);
    let worst = (0..m0).map(|i| gx[i] - asm.h[i]).fold(0.0f64, f64::max);
    start.push(worst + 1.0);
    let prog = Program {
        objective: &obj,
        a,
        b: asm.b.clone(),
        g,
        h,
    };
    let sol = prog.solve(&start, opts);
    sol.x[n]
}

/// Solves the relaxed problem for `spec`.
pub fn solve_relaxed(
    spec: &RelaxedProblemSpec,
    config: &SolverConfig,
) -> Result<RelaxedSolution, SolveError> {
    if spec.horizon == 0 {
        return Err(SolveError::Invalid("horizon must be at least 1".into()));
    }
    if !(spec.v_low.is_finite() && spec.v_high.is_finite()) {
        return Err(SolveError::Invalid(
            "target utilities must be finite".into(),
        ));
    }
    let model = &spec.model;
    let lay = Layout::build(model, spec.horizon, spec.exploit_low_structure)?;
    let ex = ValueExprs::build(model, &lay);
    let asm = assemble(spec, &lay, &ex);
    let x0 = start_point(spec, &lay, config.start_shift);
    let opts = ipm::Options {
        tol: config.tol,
        max_iter: config.max_iter,
    };

    let scale = 1.0 + spec.v_low.abs().max(spec.v_high.abs());
    let tau = phase_one(spec, &asm, &x0, opts);
    let eps = 1e-9 * scale;
    if tau > eps {
        return Err(SolveError::Infeasible {
            v_low: spec.v_low,
            v_high: spec.v_high,
            violation: tau,
        });
    }
    if tau > -eps {
        return Err(SolveError::Boundary {
            v_low: spec.v_low,
            v_high: spec.v_high,
            margin: -tau,
        });
    }

    let prefs = &model.prefs;
    let obj = CostObjective {
        prefs,
        weight: &lay.weight,
        lo: prefs.u0().unwrap_or(f64::NEG_INFINITY),
        hi: prefs.utility_sup().unwrap_or(f64::INFINITY),
    };
    let prog = Program {
        objective: &obj,
        a: asm.a.clone(),
        b: asm.b.clone(),
        g: asm.g.clone(),
        h: asm.h.clone(),
    };
    let mut sol = prog.solve(&x0, opts);
    if config.polish {
        if let Some(p) = prog.polish(&sol) {
            sol = p;
        }
    }
    if !sol.converged && sol.residuals.max() > 1e-8 {
        return Err(SolveError::NonConvergence {
            iterations: sol.iterations,
            residual: sol.residuals.max(),
        });
    }
    Ok(extract(spec, &lay, &asm, sol, -tau))
}

fn extract(
    spec: &RelaxedProblemSpec,
    lay: &Layout,
    asm: &Assembled,
    sol: ipm::Solution,
    margin: f64,
) -> RelaxedSolution {
    let model = &spec.model;
    let prefs = &model.prefs;
    let x: Vec<f64> = sol.x.iter().copied().collect();
    let ns = lay.ns;
    let ny = lay.ny;
    let mechanism = Mechanism::from_fn(model, lay.horizon, |t, sig, rep| {
        let s = sig.iter().fold(0, |a, &p| a * ns + p);
        let r = rep.iter().fold(0, |a, th| a * 2 + th.index());
        (0..ny)
            .map(|y| prefs.psi(x[lay.idx(t, s, r, y)]).max(0.0))
            .collect()
    });
    let profit = firm_profit(model, &mechanism);
    let values = ValueTable::compute(model, &mechanism);
    let promise_residual = [
        (values.root(Type::Low) - spec.v_low).abs(),
        (values.root(Type::High) - spec.v_high).abs(),
    ];
    let aux = AuxCost::new(model);
    let lik = &model.income.likelihood;
    let floor = prefs.utility_floor();
    let eps_ok = 10.0 * prefs.eps_c;
    let (pi_hh, pi_lh) = (
        model.types.pi(Type::High, Type::High),
        model.types.pi(Type::Low, Type::High),
    );
    let delta = model.delta();

    let mut nodes: Vec<NodeRecord> = Vec::new();
    let mut row = 0;
    let mut prev: Vec<(f64, f64, f64)> = Vec::new();
    for t in 1..=lay.horizon {
        let r = all_high(t - 1);
        let mut cur = Vec::new();
        for s in 0..signal_histories(ns, t) {
            let xs: Vec<f64> = (0..ny).map(|y| x[lay.idx(t, s, 2 * r + 1, y)]).collect();
            let nu: f64 = model.income.p_h.iter().zip(&xs).map(|(p, v)| p * v).sum();
            let low: f64 = model.income.p_l.iter().zip(&xs).map(|(p, v)| p * v).sum();
            let nu_low: f64 = (0..ny)
                .map(|y| model.income.p_l[y] * x[lay.idx(t, s, 2 * r, y)])
                .sum();
            let signals = decode_signals(ns, t - 1, s);
            // Node weight: discounted probability of the all-h path.
            let omega = delta.powi((t - 1) as i32)
                * signals
                    .iter()
                    .map(|&phi| model.signals.p_h[phi] * pi_hh)
                    .product::<f64>();
            let lambda = sol.z[row] / omega;
            let mu = if t == 1 {
                -sol.y[0]
            } else {
                let (pmu, plam, _) = prev[s / ns];
                let phi = s % ns;
                pmu - plam * model.signals.likelihood[phi] * pi_lh / pi_hh
            };
            let foc_residual = (0..ny)
                .filter(|&y| xs[y] - floor > 1e-9 * (1.0 + floor.abs()))
                .map(|y| (prefs.psi_prime(xs[y]) - (mu - lambda * lik[y])).abs())
                .fold(0.0f64, f64::max);
            let target = AuxTarget::new(nu, nu - low);
            let interior = aux.interior_membership(target)
                && xs.iter().all(|v| prefs.psi(*v) >= eps_ok)
                && prefs.psi(nu_low) >= eps_ok;
            let osic_slack = asm.h[row] - asm.g.row(row).dot(&sol.x.transpose());
            cur.push((mu, lambda, 0.0));
            nodes.push(NodeRecord {
                t,
                signal_rank: s,
                signals,
                x: xs,
                nu,
                delta: nu - low,
                nu_low,
                mu,
                lambda,
                osic_slack,
                foc_residual,
                interior,
            });
            row += 1;
        }
        prev = cur;
    }
    debug_assert_eq!(row, asm.n_osic);
    let interior = nodes.iter().all(|n| n.interior)
        && (1..=mechanism.horizon).all(|t| {
            (0..mechanism.nodes(t)).all(|k| {
                let s = k >> t;
                let r = k & ((1 << t) - 1);
                mechanism.z(t, s, r).iter().all(|c| *c >= eps_ok)
            })
        });
    RelaxedSolution {
        model: model.clone(),
        horizon: lay.horizon,
        v_low: spec.v_low,
        v_high: spec.v_high,
        exploit_low_structure: lay.structure,
        value: profit.total,
        profit,
        mechanism,
        nodes,
        utilities: x,
        promise_residual,
        kkt: sol.residuals,
        feasibility_margin: margin,
        interior,
        iterations: sol.iterations,
        polished: sol.polished,
    }
}

/// One row of the dynamics table.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsRow {
    pub t: usize,
    pub signals: Vec<usize>,
    pub nu: f64,
    pub delta: f64,
    pub nu_low: f64,
    pub chi_nu: f64,
    pub chi_delta: f64,
    pub foc_residual: f64,
    pub osic_slack: f64,
    /// Intertemporal residuals linking this node to its successors (absent in the last period).
    pub util_residual: Option<f64>,
    pub delta_residual: Option<f64>,
}

/// Flow utility, distortion and marginal costs at every all-`h` history.
pub fn extract_dynamics(sol: &RelaxedSolution) -> Vec<DynamicsRow> {
    let aux = AuxCost::new(&sol.model);
    let inter = intertemporal_rows(sol);
    sol.nodes
        .iter()
        .map(|n| {
            let (chi_nu, chi_delta) = aux
                .chi_gradient(AuxTarget::new(n.nu, n.delta))
                .unwrap_or((f64::NAN, f64::NAN));
            let res = inter.get(&(n.t, n.signal_rank));
            DynamicsRow {
                t: n.t,
                signals: n.signals.clone(),
                nu: n.nu,
                delta: n.delta,
                nu_low: n.nu_low,
                chi_nu,
                chi_delta,
                foc_residual: n.foc_residual,
                osic_slack: n.osic_slack,
                util_residual: res.map(|r| r.util_residual),
                delta_residual: res.map(|r| r.delta_residual),
            }
        })
        .collect()
}

pub const DYNAMICS_HEADER: &str =
    "t,signal_history,nu,delta,nu_l,chi_nu,chi_delta,foc_residual,osic_slack,util_residual,delta_residual";

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Dynamics table as CSV with 17 significant digits.
pub fn dynamics_csv(rows: &[DynamicsRow]) -> String {
    let mut out = String::new();
    out.push_str(DYNAMICS_HEADER);
    out.push('\n');
    for r in rows {
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            format_signals(&r.signals),
            num(r.nu),
            num(r.delta),
            num(r.nu_low),
            num(r.chi_nu),
            num(r.chi_delta),
            num(r.foc_residual),
            num(r.osic_slack),
            opt(r.util_residual),
            opt(r.delta_residual),
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticCostReport {
    /// Largest consumption gap between node contracts and the static cost minimizers.
    pub max_deviation: f64,
    pub per_node: Vec<(usize, usize, f64)>,
    pub failures: Vec<(usize, usize, String)>,
    pub passed: bool,
}

/// Compares every all-`h` flow contract with the static cost minimizer at its `(nu, Delta)`.
pub fn verify_static_cost_minimizers(sol: &RelaxedSolution, tol: f64) -> StaticCostReport {
    let aux = AuxCost::new(&sol.model);
    let mut per_node = Vec::new();
    let mut failures = Vec::new();
    let mut max_deviation = 0.0f64;
    for n in &sol.nodes {
        let z = sol
            .mechanism
            .z(n.t, n.signal_rank, 2 * all_high(n.t - 1) + 1);
        match aux.solve(AuxTarget::new(n.nu, n.delta), DEFAULT_TOL) {
            Ok(a) => {
                let d = a
                    .zeta
                    .z
                    .iter()
                    .zip(z)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                max_deviation = max_deviation.max(d);
                per_node.push((n.t, n.signal_rank, d));
            }
            Err(e) => failures.push((n.t, n.signal_rank, e.to_string())),
        }
    }
    StaticCostReport {
        max_deviation,
        passed: failures.is_empty() && max_deviation <= tol,
        per_node,
        failures,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntertemporalRow {
    pub t: usize,
    pub signal_rank: usize,
    pub signals: Vec<usize>,
    /// Marginal cost of flow utility today minus its expected successor.
    pub util_residual: f64,
    /// Marginal cost of distortion today minus its successor combination.
    pub delta_residual: f64,
    /// Expected inverse marginal utility today minus tomorrow's, from consumption directly.
    pub inverse_euler_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntertemporalReport {
    pub rows: Vec<IntertemporalRow>,
    /// Nodes skipped because they or a successor are not interior.
    pub skipped: Vec<(usize, usize)>,
    pub max_util: f64,
    pub max_delta: f64,
    pub max_inverse_euler: f64,
    pub passed: bool,
}

fn intertemporal_rows(sol: &RelaxedSolution) -> HashMap<(usize, usize), IntertemporalRow> {
    let (rows, _) = intertemporal_impl(sol);
    rows.into_iter()
        .map(|r| ((r.t, r.signal_rank), r))
        .collect()
}

fn intertemporal_impl(sol: &RelaxedSolution) -> (Vec<IntertemporalRow>, Vec<(usize, usize)>) {
    let model = &sol.model;
    let prefs = &model.prefs;
    let aux = AuxCost::new(model);
    let ns = model.signals.count;
    let pi_hh = model.types.pi(Type::High, Type::High);
    let pi_hl = model.types.pi(Type::High, Type::Low);
    let pi_lh = model.types.pi(Type::Low, Type::High);
    let ph_sig = &model.signals.p_h;
    let grad = |n: &NodeRecord| aux.chi_gradient(AuxTarget::new(n.nu, n.delta)).ok();
    let exp_inv = |n: &NodeRecord| -> f64 {
        model
            .income
            .p_h
            .iter()
            .zip(&n.x)
            .map(|(p, x)| p * prefs.psi_prime(*x))
            .sum()
    };
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for t in 1..sol.horizon {
        for s in 0..signal_histories(ns, t) {
            let n = sol.node(t, s);
            let kids: Vec<&NodeRecord> = (0..ns).map(|phi| sol.node(t + 1, s * ns + phi)).collect();
            if !n.interior || kids.iter().any(|k| !k.interior) {
                skipped.push((t, s));
                continue;
            }
            let (Some(g), Some(gk)) = (
                grad(n),
                kids.iter().map(|k| grad(k)).collect::<Option<Vec<_>>>(),
            ) else {
                skipped.push((t, s));
                continue;
            };
            let mut util = 0.0;
            let mut dist = 0.0;
            let mut inv = 0.0;
            for phi in 0..ns {
                let k = kids[phi];
                let low_mc = prefs.psi_prime(k.nu_low);
                util += ph_sig[phi] * (pi_hh * gk[phi].0 + pi_hl * low_mc);
                dist += ph_sig[phi] * (gk[phi].1 + pi_hl * (gk[phi].0 - low_mc));
                inv += ph_sig[phi] * (pi_hh * exp_inv(k) + pi_hl * low_mc);
            }
            dist *= pi_hh / (pi_hh - pi_lh);
            rows.push(IntertemporalRow {
                t,
                signal_rank: s,
                signals: n.signals.clone(),
                util_residual: g.0 - util,
                delta_residual: g.1 - dist,
                inverse_euler_residual: exp_inv(n) - inv,
            });
        }
    }
    (rows, skipped)
}

/// Residuals of both intertemporal optimality conditions at interior all-`h` nodes.
pub fn verify_intertemporal(sol: &RelaxedSolution, tol: f64) -> IntertemporalReport {
    let (rows, skipped) = intertemporal_impl(sol);
    let max = |f: fn(&IntertemporalRow) -> f64| rows.iter().map(|r| f(r).abs()).fold(0.0, f64::max);
    let max_util = max(|r| r.util_residual);
    let max_delta = max(|r| r.delta_residual);
    let max_inverse_euler = max(|r| r.inverse_euler_residual);
    IntertemporalReport {
        passed: max_util <= tol && max_delta <= tol && max_inverse_euler <= tol,
        rows,
        skipped,
        max_util,
        max_delta,
        max_inverse_euler,
    }
}

/// Margins below this are reported as inconclusive rather than as failures.
pub const STRICTNESS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum Applicability {
    Applicable,
    /// The claim holds trivially (no distortion to track).
    Vacuous(String),
    NotApplicable(String),
    /// Supermodularity certificate does not support the claim.
    Skipped(Psi3Sign),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicityReport {
    pub status: Applicability,
    pub certificate: Psi3Sign,
    /// `min_t (nu_{t+1} - nu_t)`.
    pub nu_margin: f64,
    /// `min_t (Delta_t - Delta_{t+1})`.
    pub delta_margin: f64,
    pub delta_last: f64,
    pub holds: bool,
    pub inconclusive: bool,
}

fn utility_range(sol: &RelaxedSolution) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for n in &sol.nodes {
        for v in n.x.iter().chain(std::iter::once(&n.nu_low)) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    (lo, hi)
}

/// Increasing flow utility and decreasing positive distortion along the all-`h` path
/// under realization-independent signals.
pub fn verify_monotonicity_ri(sol: &RelaxedSolution) -> MonotonicityReport {
    let (lo, hi) = utility_range(sol);
    let certificate = sol
        .model
        .prefs
        .supermodularity_certificate(lo, hi.max(lo + 1e-9), 64);
    let mut report = MonotonicityReport {
        status: Applicability::Applicable,
        certificate,
        nu_margin: f64::INFINITY,
        delta_margin: f64::INFINITY,
        delta_last: f64::NAN,
        holds: false,
        inconclusive: false,
    };
    if !sol.model.signals.is_realization_independent() {
        report.status =
            Applicability::NotApplicable("signals are not realization independent".into());
        return report;
    }
    if sol.v_high <= sol.v_low {
        report.status = Applicability::Vacuous("V_h <= V_l leaves no distortion".into());
        report.holds = true;
        return report;
    }
    if !sol.interior {
        report.status = Applicability::NotApplicable("solution is not interior".into());
        return report;
    }
    if matches!(certificate, Psi3Sign::NegativePsi3 | Psi3Sign::Mixed) {
        report.status = Applicability::Skipped(certificate);
        return report;
    }
    for t in 1..sol.horizon {
        let (a, b) = (sol.node(t, 0), sol.node(t + 1, 0));
        report.nu_margin = report.nu_margin.min(b.nu - a.nu);
        report.delta_margin = report.delta_margin.min(a.delta - b.delta);
    }
    report.delta_last = sol.node(sol.horizon, 0).delta;
    let m = report
        .nu_margin
        .min(report.delta_margin)
        .min(report.delta_last);
    report.holds = m > 0.0;
    report.inconclusive = m.abs() < STRICTNESS_FLOOR;
    report
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticReport {
    pub martingale_residual: f64,
    /// `min (Delta_t - E_h Delta_{t+1})`.
    pub supermartingale_gap: f64,
    /// `min (E_h nu_{t+1} - nu_t)`.
    pub upper_ordering_margin: f64,
    /// `min (nu_t - E_h nu^l_{t+1})`.
    pub lower_ordering_margin: f64,
    pub passed: bool,
}

/// Martingale flow utilities and supermartingale distortions for `u = 2 sqrt(c)` type preferences.
pub fn verify_quadratic(sol: &RelaxedSolution, tol: f64) -> Result<QuadraticReport, SolveError> {
    match sol.model.prefs.family {
        UtilityFamily::Crra { rho, .. } if (rho - 0.5).abs() < 1e-15 => {}
        _ => {
            return Err(SolveError::Invalid(
                "quadratic checks require CRRA preferences with rho = 1/2".into(),
            ))
        }
    }
    let model = &sol.model;
    let ns = model.signals.count;
    let ph = &model.signals.p_h;
    let pi_hh = model.types.pi(Type::High, Type::High);
    let pi_hl = model.types.pi(Type::High, Type::Low);
    let mut rep = QuadraticReport {
        martingale_residual: 0.0,
        supermartingale_gap: f64::INFINITY,
        upper_ordering_margin: f64::INFINITY,
        lower_ordering_margin: f64::INFINITY,
        passed: false,
    };
    for t in 1..sol.horizon {
        for s in 0..signal_histories(ns, t) {
            let n = sol.node(t, s);
            let (mut mart, mut e_nu, mut e_low, mut e_delta) = (0.0, 0.0, 0.0, 0.0);
            for phi in 0..ns {
                let k = sol.node(t + 1, s * ns + phi);
                mart += ph[phi] * (pi_hh * k.nu + pi_hl * k.nu_low);
                e_nu += ph[phi] * k.nu;
                e_low += ph[phi] * k.nu_low;
                e_delta += ph[phi] * k.delta;
            }
            rep.martingale_residual = rep.martingale_residual.max((n.nu - mart).abs());
            rep.supermartingale_gap = rep.supermartingale_gap.min(n.delta - e_delta);
            rep.upper_ordering_margin = rep.upper_ordering_margin.min(e_nu - n.nu);
            rep.lower_ordering_margin = rep.lower_ordering_margin.min(n.nu - e_low);
        }
    }
    rep.passed = rep.martingale_residual <= tol
        && rep.supermartingale_gap > 0.0
        && rep.upper_ordering_margin > 0.0
        && rep.lower_ordering_margin > 0.0;
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct T2Report {
    pub status: Applicability,
    /// `chi_Delta(1) - E_h chi_Delta(2)`.
    pub delta_margin: f64,
    /// `E_h chi_nu(2) - chi_nu(1)`.
    pub upper_margin: f64,
    /// `chi_nu(1) - E_h psi'(nu^l_2)`.
    pub lower_margin: f64,
    pub strict: bool,
}

/// Marginal-cost orderings between the two periods of a `T = 2` solution.
pub fn verify_t2_general(sol: &RelaxedSolution) -> Result<T2Report, SolveError> {
    if sol.horizon != 2 {
        return Err(SolveError::Invalid(format!(
            "requires T = 2, got T = {}",
            sol.horizon
        )));
    }
    let model = &sol.model;
    let aux = AuxCost::new(model);
    let ns = model.signals.count;
    let ph = &model.signals.p_h;
    let mut rep = T2Report {
        status: Applicability::Applicable,
        delta_margin: f64::NAN,
        upper_margin: f64::NAN,
        lower_margin: f64::NAN,
        strict: false,
    };
    if sol.v_high <= sol.v_low {
        rep.status = Applicability::Vacuous("V_h <= V_l leaves no distortion".into());
        return Ok(rep);
    }
    if !sol.interior {
        rep.status = Applicability::NotApplicable("solution is not interior".into());
        return Ok(rep);
    }
    let grad = |n: &NodeRecord| {
        aux.chi_gradient(AuxTarget::new(n.nu, n.delta))
            .map_err(|e| SolveError::Invalid(e.to_string()))
    };
    let g1 = grad(sol.node(1, 0))?;
    let (mut e_d, mut e_nu, mut e_low) = (0.0, 0.0, 0.0);
    for phi in 0..ns {
        let k = sol.node(2, phi);
        let g = grad(k)?;
        e_d += ph[phi] * g.1;
        e_nu += ph[phi] * g.0;
        e_low += ph[phi] * model.prefs.psi_prime(k.nu_low);
    }
    rep.delta_margin = g1.1 - e_d;
    rep.upper_margin = e_nu - g1.0;
    rep.lower_margin = g1.0 - e_low;
    rep.strict = rep.delta_margin > 0.0 && rep.upper_margin > 0.0 && rep.lower_margin > 0.0;
    Ok(rep)
}

/// Checks of the relaxed-solution structure at every on-path node.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureReport {
    /// Largest `|slack|` of the one-shot constraints.
    pub osic_max_abs_slack: f64,
    pub osic_min_slack: f64,
    pub post_low_variance: f64,
    pub foc_max_residual: f64,
    /// `min V_t(., h) - V_t(., l)` over all-`h` histories with `t >= 2`.
    pub min_type_reward: f64,
    pub csm_margin: f64,
    pub ctm_margin: f64,
    pub promise_residual: f64,
}

pub fn verify_structure(sol: &RelaxedSolution) -> StructureReport {
    let model = &sol.model;
    let ns = model.signals.count;
    let v = ValueTable::compute(model, &sol.mechanism);
    let mut rep = StructureReport {
        osic_max_abs_slack: 0.0,
        osic_min_slack: f64::INFINITY,
        post_low_variance: post_low_variance(&sol.mechanism),
        foc_max_residual: 0.0,
        min_type_reward: f64::INFINITY,
        csm_margin: f64::INFINITY,
        ctm_margin: f64::INFINITY,
        promise_residual: sol.promise_residual[0].max(sol.promise_residual[1]),
    };
    for n in &sol.nodes {
        rep.osic_max_abs_slack = rep.osic_max_abs_slack.max(n.osic_slack.abs());
        rep.osic_min_slack = rep.osic_min_slack.min(n.osic_slack);
        rep.foc_max_residual = rep.foc_max_residual.max(n.foc_residual);
    }
    for t in 1..=sol.horizon {
        let r = all_high(t - 1);
        for s in 0..signal_histories(ns, t) {
            if t >= 2 {
                rep.min_type_reward = rep
                    .min_type_reward
                    .min(v.get(t, s, r, Type::High) - v.get(t, s, r, Type::Low));
            }
            rep.csm_margin = rep
                .csm_margin
                .min(check_csm(model, &v, t, s, r, 0.0).margin);
            rep.ctm_margin = rep
                .ctm_margin
                .min(check_ctm(model, &v, t, s, r, 0.0).margin);
        }
    }
    rep
}

/// Conditional one-period profits `(Pi_l, Pi_h)` at continuation utilities `N = (N_l, N_h)`.
pub fn one_period_profit(model: &ModelPrimitives, n_low: f64, n_high: f64) -> Option<[f64; 2]> {
    let aux = AuxCost::new(model);
    let floor = model.prefs.utility_floor();
    if n_low < floor || n_high < floor {
        return None;
    }
    if let Some(sup) = model.prefs.utility_sup() {
        if n_low >= sup || n_high >= sup {
            return None;
        }
    }
    let chi = aux
        .chi(AuxTarget::new(n_high, (n_high - n_low).max(0.0)))
        .ok()?;
    Some([
        model.income.mean(Type::Low) - model.prefs.psi(n_low),
        model.income.mean(Type::High) - chi,
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BellmanReport {
    pub monolithic: f64,
    pub recursive: f64,
    /// Monolithic value minus the grid recursion value.
    pub gap: f64,
    pub grid: usize,
    /// Whether the best grid policy touched the edge of the grid.
    pub edge_hit: bool,
    /// Whether the search over grid policies was exhaustive.
    pub exhaustive: bool,
}

/// Two-period value by optimizing today's policy over a grid of continuation utilities.
pub fn bellman_crosscheck(sol: &RelaxedSolution, grid: usize) -> Result<BellmanReport, SolveError> {
    if sol.horizon != 2 {
        return Err(SolveError::Invalid(format!(
            "requires T = 2, got T = {}",
            sol.horizon
        )));
    }
    if grid < 2 {
        return Err(SolveError::Invalid("grid needs at least two points".into()));
    }
    let model = &sol.model;
    let prefs = &model.prefs;
    let aux = AuxCost::new(model);
    let delta = model.delta();
    let ns = model.signals.count;
    let (v_l, v_h) = (sol.v_low, sol.v_high);
    let a1 = model.annuity(1, 2);
    let floor = prefs.utility_floor();
    let span = (4.0 * (v_h - v_l).abs() / a1).max(0.5);
    let lo = (v_l.min(v_h) / a1 - span).max(floor + 1e-9);
    let mut hi = v_l.max(v_h) / a1 + span;
    if let Some(sup) = prefs.utility_sup() {
        hi = hi.min(sup - 1e-9 * (sup - floor));
    }
    let pts: Vec<f64> = (0..grid)
        .map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64)
        .collect();
    let pi = |a, b| model.types.pi(a, b);
    let (pi_hh, pi_hl, pi_lh, pi_ll) = (
        pi(Type::High, Type::High),
        pi(Type::High, Type::Low),
        pi(Type::Low, Type::High),
        pi(Type::Low, Type::Low),
    );
    // table[i * grid + j]: continuation profit after h today at N_h = pts[i], N_l = pts[j].
    let table: Vec<f64> = (0..grid * grid)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / grid, k % grid);
            one_period_profit(model, pts[j], pts[i])
                .map(|p| pi_hh * p[1] + pi_hl * p[0])
                .unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    let ph = &model.signals.p_h;
    let pl = &model.signals.p_l;
    let today = |choice: &[(usize, usize)]| -> f64 {
        let (mut eh, mut el, mut cont) = (0.0, 0.0, 0.0);
        for phi in 0..ns {
            let (i, j) = choice[phi];
            let (nh, nl) = (pts[i], pts[j]);
            eh += ph[phi] * (pi_hh * nh + pi_hl * nl);
            el += pl[phi] * (pi_lh * nh + pi_ll * nl);
            cont += ph[phi] * table[i * grid + j];
        }
        if !cont.is_finite() {
            return f64::NEG_INFINITY;
        }
        let nu = v_h - delta * eh;
        let dmin = nu - v_l + delta * el;
        match aux.chi(AuxTarget::new(nu, dmin.max(0.0))) {
            Ok(c) => model.income.mean(Type::High) - c + delta * cont,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let search = |choice: &mut Vec<(usize, usize)>, which: Option<usize>| -> f64 {
        let eval: Vec<f64> = (0..grid * grid)
            .into_par_iter()
            .map(|k| {
                let mut c = choice.clone();
                let p = (k / grid, k % grid);
                match which {
                    Some(phi) => c[phi] = p,
                    None => c.iter_mut().for_each(|e| *e = p),
                }
                today(&c)
            })
            .collect();
        let (best, val) = eval
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, v)| {
                if *v > acc.1 {
                    (k, *v)
                } else {
                    acc
                }
            });
        let p = (best / grid, best % grid);
        match which {
            Some(phi) => choice[phi] = p,
            None => choice.iter_mut().for_each(|e| *e = p),
        }
        val
    };
    let mut choice = vec![(0usize, 0usize); ns];
    let mut best = search(&mut choice, None);
    if ns > 1 {
        for _ in 0..50 {
            let before = best;
            for phi in 0..ns {
                best = best.max(search(&mut choice, Some(phi)));
            }
            if best <= before {
                break;
            }
        }
    }
    let low = model.expected_discounted_income(Type::Low, 2) - a1 * prefs.psi(v_l / a1);
    let recursive = model.types.pi_init[0] * low + model.types.pi_init[1] * best;
    let edge_hit = choice
        .iter()
        .any(|&(i, j)| i == 0 || j == 0 || i == grid - 1 || j == grid - 1);
    Ok(BellmanReport {
        monolithic: sol.value,
        recursive,
        gap: sol.value - recursive,
        grid,
        edge_hit,
        exhaustive: ns == 1,
    })
}

/// Profit and finite-difference derivatives at one target.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfitSample {
    pub v_low: f64,
    pub v_high: f64,
    pub profit: Result<Profit, SolveError>,
    pub d_low: Option<f64>,
    pub d_high: Option<f64>,
    /// Right derivative of `Pi_h` in `V_l`.
    pub d_high_right_low: Option<f64>,
}

pub const FD_STEP: f64 = 1e-4;

/// Profit of the relaxed optimum at `(V_l, V_h)`.
pub fn relaxed_profit(
    model: &ModelPrimitives,
    horizon: usize,
    v_low: f64,
    v_high: f64,
    config: &SolverConfig,
) -> Result<Profit, SolveError> {
    let spec = RelaxedProblemSpec::new(model.clone(), horizon, v_low, v_high);
    solve_relaxed(&spec, config).map(|s| s.profit)
}

/// Batch solves over a grid of `(V_l, V_h)` with derivative estimates; parallel, in grid order.
pub fn profit_function(
    model: &ModelPrimitives,
    horizon: usize,
    grid: &[(f64, f64)],
    config: &SolverConfig,
) -> Vec<ProfitSample> {
    grid.par_iter()
        .map(|&(vl, vh)| {
            let f = |a: f64, b: f64| relaxed_profit(model, horizon, a, b, config).ok();
            let profit = relaxed_profit(model, horizon, vl, vh, config);
            let base = profit.as_ref().ok().copied();
            let h = FD_STEP;
            // Central differences unless the step would cross the diagonal kink.
            let deriv = |dl: f64, dh: f64| -> Option<f64> {
                let b = base?;
                let crosses = (vl - vh).abs() <= h;
                if crosses {
                    Some((f(vl + dl * h, vh + dh * h)?.total - b.total) / h)
                } else {
                    let p = f(vl + dl * h, vh + dh * h)?;
                    let m = f(vl - dl * h, vh - dh * h)?;
                    Some((p.total - m.total) / (2.0 * h))
                }
            };
            let d_low = deriv(1.0, 0.0);
            let d_high = deriv(0.0, 1.0);
            let d_high_right_low = base.and_then(|b| Some((f(vl + h, vh)?.high - b.high) / h));
            ProfitSample {
                v_low: vl,
                v_high: vh,
                profit,
                d_low,
                d_high,
                d_high_right_low,
            }
        })
        .collect()
}

/// `psi'` of the per-period utility behind a continuation value, times the initial weight:
/// the closed-form derivative of profit on the `V_l >= V_h` side.
pub fn full_information_derivative(
    model: &ModelPrimitives,
    horizon: usize,
    v: f64,
    th: Type,
) -> f64 {
    let a = model.annuity(1, horizon);
    -model.types.initial(th) * model.prefs.psi_prime(v / a)
}

/// Whether preferences are `u(c) = 2 sqrt(c)` up to a constant.
pub fn is_quadratic_cost(prefs: &Preferences) -> bool {
    matches!(prefs.family, UtilityFamily::Crra { rho, normalization }
        if (rho - 0.5).abs() < 1e-15
            && matches!(normalization, CrraNormalization::Power | CrraNormalization::Standard))
}
