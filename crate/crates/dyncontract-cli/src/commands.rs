//! The five verbs and their reports.

use std::fmt;
use std::path::PathBuf;

use dyncontract::market::{
    commitment_check, competitive_equilibrium, information_rent_check, monopoly_solution,
    ConditionSide, EquilibriumResult, ExistenceReport, MarketError, RentReport,
};
use dyncontract::mechanism::{
    all_high, check_csm, check_ctm, check_flow_monotonicity, check_ic_exhaustive, check_osic,
    decode_reports, decode_signals, format_reports, format_signals, signal_histories, IcReport,
    Mechanism, MechanismError, Profit,
};
use dyncontract::model::{ModelPrimitives, Preferences, TypeProcess, UtilityFamily};
use dyncontract::solver::{
    dynamics_csv, extract_dynamics, is_quadratic_cost, solve_relaxed, verify_intertemporal,
    verify_monotonicity_ri, verify_quadratic, verify_static_cost_minimizers, verify_structure,
    verify_t2_general, Applicability, MonotonicityReport, RelaxedSolution, SolveError,
    STRICTNESS_FLOOR,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{ConfigError, ScenarioConfig, SweepParameter};
use crate::output::{dynamics_plot, num, sweep_plot, Emitter};

pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_PREMISE: i32 = 4;
pub const EXIT_NONCONVERGENCE: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn solve_code(e: &SolveError) -> i32 {
    match e {
        SolveError::Invalid(_) | SolveError::TooLarge { .. } => EXIT_CONFIG,
        SolveError::Infeasible { .. } | SolveError::Boundary { .. } => EXIT_INFEASIBLE,
        SolveError::NonConvergence { .. } => EXIT_NONCONVERGENCE,
    }
}

fn market_code(e: &MarketError) -> i32 {
    match e {
        MarketError::Solve(s) => solve_code(s),
        MarketError::Premise(_) => EXIT_PREMISE,
        MarketError::Precondition(_) => EXIT_CONFIG,
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        CliError {
            code: solve_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<MarketError> for CliError {
    fn from(e: MarketError) -> Self {
        CliError {
            code: market_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<MechanismError> for CliError {
    fn from(e: MechanismError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

/// Everything a verb needs after flags and config are merged.
pub struct Run {
    pub cfg: ScenarioConfig,
    pub config_text: String,
    pub out: PathBuf,
    pub tol: f64,
    pub ic_budget: u64,
    pub mechanism: Option<PathBuf>,
}

fn profit_json(p: &Profit) -> Value {
    json!({ "total": p.total, "low": p.low, "high": p.high })
}

fn applicability_json(a: &Applicability) -> Value {
    match a {
        Applicability::Applicable => json!({ "status": "applicable" }),
        Applicability::Vacuous(r) => json!({ "status": "vacuous", "reason": r }),
        Applicability::NotApplicable(r) => json!({ "status": "not_applicable", "reason": r }),
        Applicability::Skipped(c) => json!({ "status": "skipped", "certificate": c.to_string() }),
    }
}

fn ic_json(r: &IcReport, tol: f64) -> Value {
    json!({
        "max_violation": r.max_violation,
        "truthful_value": r.truthful_value,
        "best_value": r.best_value,
        "evaluations": r.evaluations,
        "exhaustive": r.exhaustive,
        "pass": r.is_ic(tol),
    })
}

fn run_ic(
    model: &ModelPrimitives,
    m: &Mechanism,
    budget: u64,
    tol: f64,
) -> Result<Value, CliError> {
    Ok(ic_json(&check_ic_exhaustive(model, m, budget)?, tol))
}

fn monotonicity_label(r: &MonotonicityReport) -> &'static str {
    match r.status {
        Applicability::Applicable if r.inconclusive => "inconclusive",
        Applicability::Applicable if r.holds => "holds",
        Applicability::Applicable => "fails",
        Applicability::Vacuous(_) => "vacuous",
        Applicability::NotApplicable(_) => "not_applicable",
        Applicability::Skipped(_) => "skipped",
    }
}

fn solution_json(sol: &RelaxedSolution) -> Value {
    json!({
        "v_low": sol.v_low,
        "v_high": sol.v_high,
        "value": sol.value,
        "profit": profit_json(&sol.profit),
        "interior": sol.interior,
        "feasibility_margin": sol.feasibility_margin,
        "iterations": sol.iterations,
        "polished": sol.polished,
        "promise_residual": sol.promise_residual,
        "kkt": {
            "stationarity": sol.kkt.stationarity,
            "primal_eq": sol.kkt.primal_eq,
            "primal_ineq": sol.kkt.primal_ineq,
            "complementarity": sol.kkt.complementarity,
        },
    })
}

/// All structural checks that apply to a relaxed solution.
fn checks_json(sol: &RelaxedSolution, tol: f64) -> Value {
    let s = verify_structure(sol);
    let structure = json!({
        "osic_max_abs_slack": s.osic_max_abs_slack,
        "osic_min_slack": s.osic_min_slack,
        "post_low_variance": s.post_low_variance,
        "foc_max_residual": s.foc_max_residual,
        "min_type_reward": s.min_type_reward,
        "csm_margin": s.csm_margin,
        "ctm_margin": s.ctm_margin,
        "promise_residual": s.promise_residual,
        "pass": s.osic_max_abs_slack <= tol
            && s.post_low_variance <= tol
            && s.foc_max_residual <= tol
            && s.min_type_reward > 0.0
            && s.csm_margin >= -tol
            && s.ctm_margin > 0.0,
    });
    let p1 = verify_static_cost_minimizers(sol, tol);
    let prop1 = json!({
        "max_deviation": p1.max_deviation,
        "failures": p1.failures.iter().map(|(t, s, e)| json!({ "t": t, "signal_rank": s, "error": e })).collect::<Vec<_>>(),
        "pass": p1.passed,
    });
    let it = verify_intertemporal(sol, tol);
    let intertemporal = json!({
        "max_util_residual": it.max_util,
        "max_delta_residual": it.max_delta,
        "max_inverse_euler_residual": it.max_inverse_euler,
        "nodes": it.rows.len(),
        "skipped": it.skipped.len(),
        "pass": it.passed,
    });
    let mono = verify_monotonicity_ri(sol);
    let monotonicity = json!({
        "applicability": applicability_json(&mono.status),
        "certificate": mono.certificate.to_string(),
        "nu_margin": mono.nu_margin,
        "delta_margin": mono.delta_margin,
        "delta_last": mono.delta_last,
        "outcome": monotonicity_label(&mono),
    });
    let quadratic = if is_quadratic_cost(&sol.model.prefs) {
        match verify_quadratic(sol, tol) {
            Ok(q) => json!({
                "martingale_residual": q.martingale_residual,
                "supermartingale_gap": q.supermartingale_gap,
                "upper_ordering_margin": q.upper_ordering_margin,
                "lower_ordering_margin": q.lower_ordering_margin,
                "pass": q.passed,
            }),
            Err(e) => json!({ "status": "not_applicable", "reason": e.to_string() }),
        }
    } else {
        json!({ "status": "not_applicable", "reason": "cost function is not quadratic" })
    };
    let two_period = match verify_t2_general(sol) {
        Ok(r) => json!({
            "applicability": applicability_json(&r.status),
            "delta_margin": r.delta_margin,
            "upper_margin": r.upper_margin,
            "lower_margin": r.lower_margin,
            "strict": r.strict,
        }),
        Err(e) => json!({ "status": "not_applicable", "reason": e.to_string() }),
    };
    json!({
        "structure": structure,
        "static_cost_minimizers": prop1,
        "intertemporal": intertemporal,
        "monotonicity_ri": monotonicity,
        "quadratic": quadratic,
        "two_period_orderings": two_period,
    })
}

pub fn cmd_solve(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let model = cfg.model()?;
    let (vl, vh) = cfg.targets(&model);
    let mut em = Emitter::new(&run.out)?;
    let sol = match solve_relaxed(&cfg.problem(&model, vl, vh), &cfg.solver_config()) {
        Ok(s) => s,
        Err(e) => {
            let code = solve_code(&e);
            if code == EXIT_INFEASIBLE {
                let certificate = match &e {
                    SolveError::Infeasible { violation, .. } => {
                        json!({ "kind": "infeasible", "violation": violation })
                    }
                    SolveError::Boundary { margin, .. } => {
                        json!({ "kind": "boundary", "margin": margin })
                    }
                    _ => Value::Null,
                };
                em.write_json(
                    "report.json",
                    &json!({
                        "command": "solve",
                        "horizon": cfg.horizon,
                        "status": "infeasible",
                        "v_low": vl,
                        "v_high": vh,
                        "certificate": certificate,
                        "message": e.to_string(),
                    }),
                )?;
                em.finish("solve", &run.config_text)?;
            }
            return Err(e.into());
        }
    };
    em.write("mechanism.txt", &sol.mechanism.serialize())?;
    em.write("dynamics.csv", &dynamics_csv(&extract_dynamics(&sol)))?;
    let ic = if cfg.solve.ic {
        run_ic(&model, &sol.mechanism, run.ic_budget, run.tol)?
    } else {
        Value::Null
    };
    let report = json!({
        "command": "solve",
        "horizon": cfg.horizon,
        "status": "solved",
        "tolerance": run.tol,
        "solution": solution_json(&sol),
        "checks": checks_json(&sol, run.tol),
        "incentive_compatibility": ic,
    });
    em.write_json("report.json", &report)?;
    em.write("plot_dynamics.gp", &dynamics_plot(cfg.horizon))?;
    em.finish("solve", &run.config_text)?;
    Ok(())
}

fn side_json(s: &ConditionSide) -> Value {
    json!({
        "factor": s.factor,
        "lhs": s.lhs,
        "literal_factor": s.literal_factor,
        "literal_lhs": s.literal_lhs,
    })
}

fn existence_json(e: &ExistenceReport) -> Value {
    json!({
        "shares": e.shares,
        "rhs": e.rhs,
        "side": side_json(&e.side),
        "margin": e.margin,
        "exists_pure": e.exists_pure,
        "literal_margin": e.literal_margin,
        "literal_exists": e.literal_exists,
    })
}

fn rent_json(r: &RentReport) -> Value {
    json!({
        "outside": r.outside,
        "c_outside_low": r.c_outside_low,
        "derivative": r.derivative,
        "rhs": r.rhs,
        "side": side_json(&r.side),
        "no_rents": r.no_rents,
        "literal_no_rents": r.literal_no_rents,
    })
}

fn equilibrium_json(eq: &EquilibriumResult) -> Value {
    json!({
        "v_star": eq.v_star,
        "v_fi": eq.v_fi,
        "c_fi": eq.c_fi,
        "profit": profit_json(&eq.profit),
        "zero_profit_residual": eq.zero_profit_residual,
        "bracket": eq.bracket,
        "iterations": eq.iterations,
        "high_profit_right_derivative": eq.derivative,
        "existence": existence_json(&eq.existence),
    })
}

fn error_json(code: i32, message: String) -> Value {
    json!({ "status": "failed", "exit_code": code, "message": message })
}

pub fn cmd_equilibrium(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let model = cfg.model()?;
    let scfg = cfg.solver_config();
    let eq = competitive_equilibrium(&model, cfg.horizon, &scfg)?;
    let commitment = if cfg.equilibrium.commitment {
        let c = commitment_check(&eq, &model)?;
        json!({
            "c_outside": c.c_outside,
            "min_slack": c.min_slack,
            "all_pass": c.all_pass,
            "rows": c.rows.iter().map(|r| json!({
                "t": r.t,
                "signals": r.signals,
                "types": r.types,
                "value": r.value,
                "outside": r.outside,
                "slack": r.slack,
                "pass": r.pass,
            })).collect::<Vec<_>>(),
        })
    } else {
        Value::Null
    };
    let ic = if cfg.equilibrium.ic {
        run_ic(&model, &eq.mechanism, run.ic_budget, run.tol)?
    } else {
        Value::Null
    };
    let rent = match information_rent_check(&model, cfg.horizon, &scfg) {
        Ok(r) => rent_json(&r),
        Err(e) => error_json(market_code(&e), e.to_string()),
    };
    let sweep: Vec<Value> = cfg
        .equilibrium
        .mu_sweep
        .par_iter()
        .map(|&mu| {
            let mut m = model.clone();
            m.types = TypeProcess::new(cfg.types.pi_hh, cfg.types.pi_ll, mu);
            if let Err(e) = ModelPrimitives::validated(
                m.prefs.clone(),
                m.types.clone(),
                m.income.clone(),
                m.signals.clone(),
            ) {
                return json!({ "mu_l": mu, "result": error_json(EXIT_CONFIG, e.to_string()) });
            }
            match competitive_equilibrium(&m, cfg.horizon, &scfg) {
                Ok(e) => json!({
                    "mu_l": mu,
                    "result": {
                        "status": "ok",
                        "v_star": e.v_star,
                        "margin": e.existence.margin,
                        "exists_pure": e.existence.exists_pure,
                        "literal_margin": e.existence.literal_margin,
                        "literal_exists": e.existence.literal_exists,
                    },
                }),
                Err(e) => {
                    json!({ "mu_l": mu, "result": error_json(market_code(&e), e.to_string()) })
                }
            }
        })
        .collect();
    let mut em = Emitter::new(&run.out)?;
    em.write("mechanism_equilibrium.txt", &eq.mechanism.serialize())?;
    let report = json!({
        "command": "equilibrium",
        "horizon": cfg.horizon,
        "tolerance": run.tol,
        "equilibrium": equilibrium_json(&eq),
        "incentive_compatibility": ic,
        "information_rent": rent,
        "mu_sweep": sweep,
        "commitment": commitment,
        "mechanism_file": "mechanism_equilibrium.txt",
    });
    em.write_json("report.json", &report)?;
    em.finish("equilibrium", &run.config_text)?;
    Ok(())
}

pub fn cmd_monopoly(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let model = cfg.model()?;
    let res = monopoly_solution(&model, cfg.horizon, &cfg.solver_config())?;
    let ic = if cfg.solve.ic {
        run_ic(&model, &res.mechanism, run.ic_budget, run.tol)?
    } else {
        Value::Null
    };
    let mut em = Emitter::new(&run.out)?;
    em.write("mechanism_monopoly.txt", &res.mechanism.serialize())?;
    let report = json!({
        "command": "monopoly",
        "horizon": cfg.horizon,
        "tolerance": run.tol,
        "monopoly": {
            "v_m": res.v_m,
            "outside": res.outside,
            "profit": profit_json(&res.profit),
            "rents_low": res.rents_low,
            "corner": res.corner,
            "evaluations": res.evaluations,
        },
        "information_rent": rent_json(&res.rent),
        "rent_check_agrees": res.rent.no_rents == res.corner,
        "incentive_compatibility": ic,
        "mechanism_file": "mechanism_monopoly.txt",
    });
    em.write_json("report.json", &report)?;
    em.finish("monopoly", &run.config_text)?;
    Ok(())
}

pub fn cmd_verify(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let model = cfg.model()?;
    let path = run
        .mechanism
        .clone()
        .or_else(|| cfg.verify.mechanism.clone())
        .ok_or_else(|| {
            CliError::config("no mechanism file: pass --mechanism or set verify.mechanism")
        })?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let m = Mechanism::parse(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    m.check_shape(&model)?;
    let tol = run.tol;
    let ns = model.signals.count;
    let ic = check_ic_exhaustive(&model, &m, run.ic_budget)?;
    let osic = check_osic(&model, &m, tol);
    let osic_ok = osic.iter().all(|o| !o.violated);
    let mut flow_bad = Vec::new();
    for t in 1..=m.horizon {
        for s in 0..signal_histories(ns, t) {
            for r in 0..(1usize << t) {
                if !check_flow_monotonicity(&model, &m.contract(t, s, r), tol) {
                    flow_bad.push(json!({
                        "t": t,
                        "signals": format_signals(&decode_signals(ns, t - 1, s)),
                        "reports": format_reports(&decode_reports(t, r)),
                    }));
                }
            }
        }
    }
    let values = dyncontract::mechanism::ValueTable::compute(&model, &m);
    let mut csm = Vec::new();
    let mut ctm = Vec::new();
    let (mut csm_ok, mut ctm_ok) = (true, true);
    for t in 1..m.horizon {
        let r = all_high(t - 1);
        for s in 0..signal_histories(ns, t) {
            let signals = format_signals(&decode_signals(ns, t - 1, s));
            let a = check_csm(&model, &values, t, s, r, tol);
            let b = check_ctm(&model, &values, t, s, r, STRICTNESS_FLOOR);
            csm_ok &= a.holds;
            ctm_ok &= b.holds;
            csm.push(json!({ "t": t, "signals": signals, "margin": a.margin, "holds": a.holds }));
            ctm.push(json!({
                "t": t,
                "signals": signals,
                "margin": b.margin,
                "result": if b.holds { "strict" } else { "not strict" },
            }));
        }
    }
    let ic_v = ic_json(&ic, tol);
    let all_pass = ic.is_ic(tol) && osic_ok && flow_bad.is_empty() && csm_ok && ctm_ok;
    let report = json!({
        "command": "verify",
        "horizon": m.horizon,
        "tolerance": tol,
        "incentive_compatibility": ic_v,
        "osic": {
            "pass": osic_ok,
            "nodes": osic.iter().map(|o| json!({
                "t": o.t,
                "signals": format_signals(&o.signals),
                "slack": o.slack,
                "binding": o.binding,
                "violated": o.violated,
            })).collect::<Vec<_>>(),
        },
        "flow_monotonicity": { "pass": flow_bad.is_empty(), "violations": flow_bad },
        "csm": { "pass": csm_ok, "nodes": csm },
        "ctm": { "result": if ctm_ok { "strict" } else { "not strict" }, "nodes": ctm },
        "all_pass": all_pass,
    });
    let mut em = Emitter::new(&run.out)?;
    em.write_json("report.json", &report)?;
    em.finish("verify", &run.config_text)?;
    Ok(())
}

struct SweepRow {
    value: f64,
    outcome: Result<RelaxedSolution, SolveError>,
    targets: (f64, f64),
    certificate: String,
    monotone: &'static str,
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub const SWEEP_HEADER: &str =
    "value,status,exit_code,profit_total,profit_low,profit_high,v_low,v_high,\
delta_1,nu_1,delta_last_min,delta_last_max,osic_max_abs_slack,monotone_ri,certificate,message";

fn sweep_point(
    cfg: &ScenarioConfig,
    base: &ModelPrimitives,
    p: SweepParameter,
    value: f64,
) -> SweepRow {
    let mut model = base.clone();
    match p {
        SweepParameter::VHigh => {}
        SweepParameter::MuLow => {
            model.types = TypeProcess::new(cfg.types.pi_hh, cfg.types.pi_ll, value)
        }
        SweepParameter::Rho => {
            if let UtilityFamily::Crra { normalization, .. } = model.prefs.family {
                let eps = model.prefs.eps_c;
                model.prefs = Preferences::crra(value, normalization, model.prefs.delta);
                model.prefs.eps_c = eps;
            }
        }
    }
    let (vl, mut vh) = cfg.targets(&model);
    if p == SweepParameter::VHigh {
        vh = value;
    }
    let violations = model.validate();
    let outcome = if violations.is_empty() {
        solve_relaxed(&cfg.problem(&model, vl, vh), &cfg.solver_config())
    } else {
        Err(SolveError::Invalid(
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ))
    };
    let (lo, hi) = match &outcome {
        Ok(sol) => sol
            .nodes
            .iter()
            .flat_map(|n| n.x.iter().copied().chain(std::iter::once(n.nu_low)))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
                (a.min(x), b.max(x))
            }),
        Err(_) => {
            let y = &model.income.levels;
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (model.prefs.u(lo), model.prefs.u(hi))
        }
    };
    let certificate = if violations.is_empty() {
        model
            .prefs
            .supermodularity_certificate(lo, hi.max(lo + 1e-9), 64)
            .to_string()
    } else {
        String::new()
    };
    let monotone = match &outcome {
        Ok(sol) => monotonicity_label(&verify_monotonicity_ri(sol)),
        Err(_) => "",
    };
    SweepRow {
        value,
        outcome,
        targets: (vl, vh),
        certificate,
        monotone,
    }
}

fn sweep_line(row: &SweepRow, horizon: usize) -> String {
    let (vl, vh) = row.targets;
    match &row.outcome {
        Ok(sol) => {
            let ns = sol.model.signals.count;
            let last: Vec<f64> = (0..signal_histories(ns, horizon))
                .map(|s| sol.node(horizon, s).delta)
                .collect();
            let s = verify_structure(sol);
            let first = sol.node(1, 0);
            format!(
                "{},ok,0,{},{},{},{},{},{},{},{},{},{},{},{},",
                num(row.value),
                num(sol.profit.total),
                num(sol.profit.low),
                num(sol.profit.high),
                num(vl),
                num(vh),
                num(first.delta),
                num(first.nu),
                num(last.iter().copied().fold(f64::INFINITY, f64::min)),
                num(last.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                num(s.osic_max_abs_slack),
                row.monotone,
                row.certificate,
            )
        }
        Err(e) => format!(
            "{},failed,{},,,,{},{},,,,,,,{},{}",
            num(row.value),
            solve_code(e),
            num(vl),
            num(vh),
            row.certificate,
            csv_quote(&e.to_string()),
        ),
    }
}

pub fn cmd_sweep(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::config("missing table [sweep]"))?;
    if sweep.values.is_empty() {
        return Err(CliError::config("sweep.values is empty"));
    }
    let model = cfg.model()?;
    if sweep.parameter == SweepParameter::Rho
        && !matches!(model.prefs.family, UtilityFamily::Crra { .. })
    {
        return Err(CliError::config("a rho sweep requires family = \"crra\""));
    }
    let rows: Vec<SweepRow> = sweep
        .values
        .par_iter()
        .map(|&v| sweep_point(cfg, &model, sweep.parameter, v))
        .collect();
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&sweep_line(r, cfg.horizon));
        csv.push('\n');
    }
    let mut em = Emitter::new(&run.out)?;
    em.write("sweep.csv", &csv)?;
    em.write("plot_sweep.gp", &sweep_plot(sweep.parameter.name()))?;
    em.finish("sweep", &run.config_text)?;
    Ok(())
}
