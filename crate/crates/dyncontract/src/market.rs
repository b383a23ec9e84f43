//! Market outcomes built on the relaxed program: the competitive equilibrium
//! with its pure-strategy existence condition, the reentry commitment check,
//! and the monopolist's offer with its information-rent condition.

use roots::{find_root_brent, Convergency};

use crate::mechanism::{
    decode_reports, decode_signals, firm_profit, format_reports, format_signals, Mechanism, Profit,
    ValueTable,
};
use crate::model::{ModelPrimitives, Type};
use crate::solver::{solve_relaxed, RelaxedProblemSpec, RelaxedSolution, SolveError, SolverConfig};

/// Stop once `|Pi_h| <= ROOT_TOL`.
pub const ROOT_TOL: f64 = 1e-8;
pub const ROOT_MAX_ITER: usize = 60;
/// One-sided steps for the Richardson-extrapolated right derivative.
pub const RIGHT_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];
/// Golden-section bracket width relative to the search interval.
const GOLDEN_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum MarketError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("model premise violated: {0}")]
    Premise(String),
    #[error("precondition unmet: {0}")]
    Precondition(String),
}

/// Both readings of the marginal-utility factor in the existence and rent conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionSide {
    /// `u'(c)`: the factor that converts `d Pi_h / d V_l` into units of `mu_l / mu_h`.
    pub factor: f64,
    pub lhs: f64,
    /// `u'(u^{-1}(c))` with `c` read as a utility level; `None` outside the range of `u`.
    pub literal_factor: Option<f64>,
    pub literal_lhs: Option<f64>,
}

impl ConditionSide {
    fn new(model: &ModelPrimitives, c: f64, derivative: f64) -> Self {
        let prefs = &model.prefs;
        let factor = prefs.u_prime(c);
        let in_range = c >= prefs.utility_floor() && prefs.utility_sup().map_or(true, |s| c < s);
        let literal_factor = in_range
            .then(|| prefs.u_prime(prefs.psi(c)))
            .filter(|v| v.is_finite());
        ConditionSide {
            factor,
            lhs: factor * derivative,
            literal_factor,
            literal_lhs: literal_factor.map(|f| f * derivative),
        }
    }
}

fn share_ratio(shares: [f64; 2]) -> f64 {
    if shares[1] == 0.0 {
        f64::INFINITY
    } else {
        shares[0] / shares[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExistenceReport {
    pub shares: [f64; 2],
    pub rhs: f64,
    pub side: ConditionSide,
    /// `rhs - lhs`; a pure-strategy equilibrium exists iff positive.
    pub margin: f64,
    pub exists_pure: bool,
    pub literal_margin: Option<f64>,
    pub literal_exists: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct EquilibriumResult {
    pub horizon: usize,
    pub v_star: [f64; 2],
    pub v_fi: [f64; 2],
    pub c_fi: [f64; 2],
    pub mechanism: Mechanism,
    pub profit: Profit,
    pub zero_profit_residual: f64,
    /// `Pi_h(V^FI_l, .)` at the two ends of the search interval.
    pub bracket: [f64; 2],
    pub iterations: usize,
    /// `None` when types are indistinguishable and the outcome is full insurance.
    pub solution: Option<RelaxedSolution>,
    /// Right derivative of `Pi_h` in `V_l` at `V*`.
    pub derivative: f64,
    pub existence: ExistenceReport,
}

impl EquilibriumResult {
    pub fn exists_pure(&self) -> bool {
        self.existence.exists_pure
    }

    pub fn existence_margin(&self) -> f64 {
        self.existence.margin
    }
}

struct RootStop {
    x_tol: f64,
    iterations: usize,
}

impl Convergency<f64> for RootStop {
    fn is_root_found(&mut self, y: f64) -> bool {
        y.abs() <= ROOT_TOL
    }
    fn is_converged(&mut self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.x_tol
    }
    fn is_iteration_limit_reached(&mut self, iter: usize) -> bool {
        self.iterations = iter;
        iter >= ROOT_MAX_ITER
    }
}

fn solve_at(
    model: &ModelPrimitives,
    horizon: usize,
    v: [f64; 2],
    cfg: &SolverConfig,
) -> Result<RelaxedSolution, SolveError> {
    solve_relaxed(
        &RelaxedProblemSpec::new(model.clone(), horizon, v[0], v[1]),
        cfg,
    )
}

/// One-sided right derivative of `f` at `x`, Richardson-extrapolated over `RIGHT_STEPS`.
pub fn right_derivative<E>(mut f: impl FnMut(f64) -> Result<f64, E>, x: f64) -> Result<f64, E> {
    let f0 = f(x)?;
    let mut table: Vec<Vec<f64>> = Vec::new();
    for (i, h) in RIGHT_STEPS.iter().enumerate() {
        let mut row = vec![(f(x + h)? - f0) / h];
        for j in 1..=i {
            // Error expands in powers of h: Neville elimination on the step ratio.
            let r = RIGHT_STEPS[i - j] / h;
            row.push((r * row[j - 1] - table[i - 1][j - 1]) / (r - 1.0));
        }
        table.push(row);
    }
    Ok(*table
        .last()
        .and_then(|r| r.last())
        .expect("non-empty steps"))
}

/// `d+ Pi_h / d V_l` at `v`.
pub fn high_profit_right_derivative(
    model: &ModelPrimitives,
    horizon: usize,
    v: [f64; 2],
    cfg: &SolverConfig,
) -> Result<f64, SolveError> {
    right_derivative(
        |vl| solve_at(model, horizon, [vl, v[1]], cfg).map(|s| s.profit.high),
        v[0],
    )
}

/// Existence condition at the equilibrium for arbitrary population shares.
pub fn existence_check(
    eq: &EquilibriumResult,
    model: &ModelPrimitives,
    shares: [f64; 2],
) -> ExistenceReport {
    let side = ConditionSide::new(model, eq.c_fi[0], eq.derivative);
    let rhs = share_ratio(shares);
    let margin = rhs - side.lhs;
    let literal_margin = side.literal_lhs.map(|l| rhs - l);
    ExistenceReport {
        shares,
        rhs,
        side,
        margin,
        exists_pure: margin > 0.0,
        literal_margin,
        literal_exists: literal_margin.map(|m| m > 0.0),
    }
}

/// Low type at full-information utility; high type's utility zeroes the firm's profit on her.
pub fn competitive_equilibrium(
    model: &ModelPrimitives,
    horizon: usize,
    cfg: &SolverConfig,
) -> Result<EquilibriumResult, MarketError> {
    let (vl, cl) = model.full_info_utility(Type::Low, horizon);
    let (vh, ch) = model.full_info_utility(Type::High, horizon);
    let scale = 1.0 + vl.abs().max(vh.abs());
    let shares = model.types.mu_shares();

    if (vh - vl).abs() <= 1e-12 * scale {
        // Indistinguishable types: full insurance at the common actuarial consumption.
        let mechanism = Mechanism::constant(model, horizon, cl);
        let profit = firm_profit(model, &mechanism);
        let mut eq = EquilibriumResult {
            horizon,
            v_star: [vl, vl],
            v_fi: [vl, vh],
            c_fi: [cl, ch],
            mechanism,
            profit,
            zero_profit_residual: profit.high.abs(),
            bracket: [0.0, 0.0],
            iterations: 0,
            solution: None,
            derivative: 0.0,
            existence: existence_check_placeholder(shares),
        };
        eq.existence = existence_check(&eq, model, shares);
        return Ok(eq);
    }
    if vh < vl {
        return Err(MarketError::Premise(format!(
            "full-information utilities are not ordered: V^FI_l = {vl}, V^FI_h = {vh}"
        )));
    }

    let premise = |e: SolveError| match e {
        SolveError::Infeasible { .. } | SolveError::Boundary { .. } => MarketError::Premise(
            format!("full-information utility pair is not implementable: {e}"),
        ),
        other => MarketError::Solve(other),
    };
    let lo = solve_at(model, horizon, [vl, vl], cfg)
        .map_err(premise)?
        .profit
        .high;
    let hi = solve_at(model, horizon, [vl, vh], cfg)
        .map_err(premise)?
        .profit
        .high;
    if !(lo > 0.0 && hi < 0.0) {
        return Err(MarketError::Premise(format!(
            "Pi_h(V^FI_l, .) does not change sign on [V^FI_l, V^FI_h]: {lo} at V^FI_l, {hi} at V^FI_h"
        )));
    }

    let mut failure: Option<SolveError> = None;
    let mut stop = RootStop {
        x_tol: 1e-15 * scale,
        iterations: 0,
    };
    let root = find_root_brent(
        vl,
        vh,
        |x| match solve_at(model, horizon, [vl, x], cfg) {
            Ok(s) => s.profit.high,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &mut stop,
    );
    if let Some(e) = failure {
        return Err(MarketError::Solve(e));
    }
    let v_star_h = root.map_err(|e| MarketError::Premise(format!("root search failed: {e:?}")))?;
    let sol = solve_at(model, horizon, [vl, v_star_h], cfg)?;
    let derivative = high_profit_right_derivative(model, horizon, [vl, v_star_h], cfg)?;
    let mut eq = EquilibriumResult {
        horizon,
        v_star: [vl, v_star_h],
        v_fi: [vl, vh],
        c_fi: [cl, ch],
        mechanism: sol.mechanism.clone(),
        profit: sol.profit,
        zero_profit_residual: sol.profit.high.abs(),
        bracket: [lo, hi],
        iterations: stop.iterations,
        solution: Some(sol),
        derivative,
        existence: existence_check_placeholder(shares),
    };
    eq.existence = existence_check(&eq, model, shares);
    Ok(eq)
}

fn existence_check_placeholder(shares: [f64; 2]) -> ExistenceReport {
    ExistenceReport {
        shares,
        rhs: share_ratio(shares),
        side: ConditionSide {
            factor: f64::NAN,
            lhs: f64::NAN,
            literal_factor: None,
            literal_lhs: None,
        },
        margin: f64::NAN,
        exists_pure: false,
        literal_margin: None,
        literal_exists: None,
    }
}

/// One on-path history in the commitment table.
#[derive(Clone, Debug, PartialEq)]
pub struct CommitmentRow {
    pub t: usize,
    pub signals: String,
    /// Types `theta_1 .. theta_t`.
    pub types: String,
    pub value: f64,
    pub outside: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct CommitmentReport {
    /// Reentry consumption offered to a consumer believed to be low.
    pub c_outside: f64,
    pub rows: Vec<CommitmentRow>,
    pub min_slack: f64,
    pub all_pass: bool,
}

/// Continuation utility versus the reentry offer at every on-path history.
/// Requires an absorbing low state and realization-independent signals.
pub fn commitment_check(
    eq: &EquilibriumResult,
    model: &ModelPrimitives,
) -> Result<CommitmentReport, MarketError> {
    let pi_ll = model.types.pi(Type::Low, Type::Low);
    if (pi_ll - 1.0).abs() > 1e-12 {
        return Err(MarketError::Precondition(format!(
            "low type must be absorbing (pi_ll = 1), got {pi_ll}"
        )));
    }
    if !model.signals.is_realization_independent() {
        return Err(MarketError::Precondition(
            "signals must be realization independent".into(),
        ));
    }
    let horizon = eq.horizon;
    let c_out = model.income.mean(Type::Low);
    let u_out = model.prefs.u(c_out);
    let values = ValueTable::compute(model, &eq.mechanism);
    let ns = model.signals.count;
    let tol = 1e-9 * (1.0 + eq.v_star[0].abs().max(eq.v_star[1].abs()));

    // Reach probabilities over (signal history, past reports, current type).
    let mut reach: Vec<f64> = Type::ALL
        .iter()
        .map(|&th| model.types.initial(th))
        .collect();
    let mut rows = Vec::new();
    for t in 1..=horizon {
        let nrep = 1usize << (t - 1);
        let outside = u_out * model.annuity(t, horizon);
        let nsig = reach.len() / (nrep * 2);
        for s in 0..nsig {
            for r in 0..nrep {
                for th in Type::ALL {
                    if reach[(s * nrep + r) * 2 + th.index()] <= 0.0 {
                        continue;
                    }
                    let value = values.get(t, s, r, th);
                    let slack = value - outside;
                    let mut types = format_reports(&decode_reports(t - 1, r));
                    types.push(th.symbol());
                    rows.push(CommitmentRow {
                        t,
                        signals: format_signals(&decode_signals(ns, t - 1, s)),
                        types,
                        value,
                        outside,
                        slack,
                        pass: slack >= -tol,
                    });
                }
            }
        }
        if t < horizon {
            let mut next = vec![0.0; nsig * ns * nrep * 2 * 2];
            for s in 0..nsig {
                for r in 0..nrep {
                    for th in Type::ALL {
                        let p = reach[(s * nrep + r) * 2 + th.index()];
                        if p <= 0.0 {
                            continue;
                        }
                        let rr = 2 * r + th.index();
                        for (y, py) in model.income.probs(th).iter().enumerate() {
                            let sc = s * ns + model.signals.map[y];
                            for nt in Type::ALL {
                                next[(sc * nrep * 2 + rr) * 2 + nt.index()] +=
                                    p * py * model.types.pi(th, nt);
                            }
                        }
                    }
                }
            }
            reach = next;
        }
    }
    let min_slack = rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    Ok(CommitmentReport {
        c_outside: c_out,
        all_pass: rows.iter().all(|r| r.pass),
        rows,
        min_slack,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RentReport {
    pub outside: [f64; 2],
    /// Constant consumption flow delivering the low type's outside option.
    pub c_outside_low: f64,
    /// Right derivative of `Pi_h` in `V_l` at the outside options.
    pub derivative: f64,
    pub rhs: f64,
    pub side: ConditionSide,
    /// The monopolist leaves no rents iff `lhs <= rhs`.
    pub no_rents: bool,
    pub literal_no_rents: Option<bool>,
}

/// Whether the monopolist holds both types at their outside options.
pub fn information_rent_check(
    model: &ModelPrimitives,
    horizon: usize,
    cfg: &SolverConfig,
) -> Result<RentReport, MarketError> {
    let outside = [
        model.outside_option(Type::Low, horizon),
        model.outside_option(Type::High, horizon),
    ];
    let c_low = model.prefs.psi(outside[0] / model.annuity(1, horizon));
    let derivative = high_profit_right_derivative(model, horizon, outside, cfg)?;
    let side = ConditionSide::new(model, c_low, derivative);
    let rhs = share_ratio(model.types.mu_shares());
    Ok(RentReport {
        outside,
        c_outside_low: c_low,
        derivative,
        rhs,
        side,
        no_rents: side.lhs <= rhs,
        literal_no_rents: side.literal_lhs.map(|l| l <= rhs),
    })
}

#[derive(Clone, Debug)]
pub struct MonopolyResult {
    pub horizon: usize,
    pub v_m: [f64; 2],
    pub outside: [f64; 2],
    pub mechanism: Mechanism,
    pub profit: Profit,
    /// `V^M_l - V_l` at the outside option.
    pub rents_low: f64,
    /// Optimum at the low type's outside option.
    pub corner: bool,
    pub evaluations: usize,
    pub solution: RelaxedSolution,
    pub rent: RentReport,
}

/// Maximizes expected profit over `V_l` with the high type held at her outside option.
pub fn monopoly_solution(
    model: &ModelPrimitives,
    horizon: usize,
    cfg: &SolverConfig,
) -> Result<MonopolyResult, MarketError> {
    let outside = [
        model.outside_option(Type::Low, horizon),
        model.outside_option(Type::High, horizon),
    ];
    if outside[0] >= outside[1] {
        return Err(MarketError::Premise(format!(
            "outside options are not ordered: V_l = {}, V_h = {}",
            outside[0], outside[1]
        )));
    }
    let vh = outside[1];
    let mut evaluations = 0;
    let mut total = |vl: f64| -> Result<f64, SolveError> {
        evaluations += 1;
        solve_at(model, horizon, [vl, vh], cfg).map(|s| s.profit.total)
    };

    // Golden section on the concave map V_l -> Pi(V_l, V_h).
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (outside[0], outside[1]);
    let width = b - a;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = total(x1)?;
    let mut f2 = total(x2)?;
    while b - a > GOLDEN_TOL * width {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = total(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = total(x2)?;
        }
    }
    let (interior, f_interior) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    let best = if total(outside[0])? >= f_interior {
        outside[0]
    } else {
        interior
    };
    let sol = solve_at(model, horizon, [best, vh], cfg)?;
    let rent = information_rent_check(model, horizon, cfg)?;
    let rents_low = best - outside[0];
    Ok(MonopolyResult {
        horizon,
        v_m: [best, vh],
        outside,
        mechanism: sol.mechanism.clone(),
        profit: sol.profit,
        rents_low,
        corner: rents_low <= 1e-6 * width,
        evaluations,
        solution: sol,
        rent,
    })
}
