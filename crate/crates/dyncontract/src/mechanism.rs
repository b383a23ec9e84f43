//! Direct mechanisms over observable histories, consumer values, firm profits,
//! incentive checks and the continuation monotonicity checks.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{FlowContract, ModelPrimitives, Type};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("mechanism shape does not match the model: {0}")]
    Shape(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// Contracts `z_t(phi^{t-1}, reports^t)` stored densely per period.
///
/// Signal histories are ranked in base `|Phi|` and report histories in base 2
/// (`l = 0`, `h = 1`), earliest entry most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct Mechanism {
    pub horizon: usize,
    pub income: Vec<f64>,
    pub signal_map: Vec<usize>,
    pub n_signals: usize,
    flows: Vec<Vec<f64>>,
}

/// Number of signal histories of length `t - 1`.
pub fn signal_histories(n_signals: usize, t: usize) -> usize {
    n_signals.pow((t - 1) as u32)
}

/// Rank of the all-`h` report history of length `k`.
pub fn all_high(k: usize) -> usize {
    (1usize << k) - 1
}

/// Decodes a signal-history rank into labels.
pub fn decode_signals(n_signals: usize, len: usize, mut s: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for k in (0..len).rev() {
        out[k] = s % n_signals;
        s /= n_signals;
    }
    out
}

/// Decodes a report-history rank into types.
pub fn decode_reports(len: usize, r: usize) -> Vec<Type> {
    (0..len)
        .map(|k| Type::from_index((r >> (len - 1 - k)) & 1))
        .collect()
}

pub fn format_signals(sig: &[usize]) -> String {
    if sig.is_empty() {
        "-".to_string()
    } else {
        sig.iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(".")
    }
}

pub fn format_reports(rep: &[Type]) -> String {
    rep.iter().map(|t| t.symbol()).collect()
}

impl Mechanism {
    /// Mechanism with every contract produced by `f(t, signals, reports)`.
    pub fn from_fn<F>(model: &ModelPrimitives, horizon: usize, mut f: F) -> Self
    where
        F: FnMut(usize, &[usize], &[Type]) -> Vec<f64>,
    {
        let ny = model.income.len();
        let ns = model.signals.count;
        let mut flows = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            let nsig = signal_histories(ns, t);
            let nrep = 1usize << t;
            let mut v = Vec::with_capacity(nsig * nrep * ny);
            for s in 0..nsig {
                let sig = decode_signals(ns, t - 1, s);
                for r in 0..nrep {
                    let z = f(t, &sig, &decode_reports(t, r));
                    assert_eq!(z.len(), ny, "contract length");
                    v.extend(z);
                }
            }
            flows.push(v);
        }
        Mechanism {
            horizon,
            income: model.income.levels.clone(),
            signal_map: model.signals.map.clone(),
            n_signals: ns,
            flows,
        }
    }

    /// Full insurance at consumption `c` after every history.
    pub fn constant(model: &ModelPrimitives, horizon: usize, c: f64) -> Self {
        let ny = model.income.len();
        Self::from_fn(model, horizon, |_, _, _| vec![c; ny])
    }

    fn offset(&self, t: usize, s: usize, r: usize) -> usize {
        ((s << t) + r) * self.income.len()
    }

    /// Contract at period `t`, signal history rank `s`, report history rank `r` (length `t`).
    pub fn z(&self, t: usize, s: usize, r: usize) -> &[f64] {
        let o = self.offset(t, s, r);
        &self.flows[t - 1][o..o + self.income.len()]
    }

    pub fn z_mut(&mut self, t: usize, s: usize, r: usize) -> &mut [f64] {
        let o = self.offset(t, s, r);
        let n = self.income.len();
        &mut self.flows[t - 1][o..o + n]
    }

    pub fn contract(&self, t: usize, s: usize, r: usize) -> FlowContract {
        FlowContract::new(self.z(t, s, r).to_vec())
    }

    /// Number of stored nodes in period `t`.
    pub fn nodes(&self, t: usize) -> usize {
        signal_histories(self.n_signals, t) << t
    }

    /// Errors unless the mechanism was built for this model's income support and signals.
    pub fn check_shape(&self, model: &ModelPrimitives) -> Result<(), MechanismError> {
        if self.income != model.income.levels {
            return Err(MechanismError::Shape(format!(
                "income levels {:?} vs {:?}",
                self.income, model.income.levels
            )));
        }
        if self.signal_map != model.signals.map {
            return Err(MechanismError::Shape(format!(
                "signal map {:?} vs {:?}",
                self.signal_map, model.signals.map
            )));
        }
        Ok(())
    }

    /// Text form: one `node` record per `(t, signal history, report history)`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let num = |x: f64| format!("{x:.16e}");
        writeln!(out, "dyncontract-mechanism 1").unwrap();
        writeln!(out, "horizon {}", self.horizon).unwrap();
        let inc: Vec<String> = self.income.iter().map(|y| num(*y)).collect();
        writeln!(out, "income {}", inc.join(" ")).unwrap();
        let map: Vec<String> = self.signal_map.iter().map(|s| s.to_string()).collect();
        writeln!(out, "signal_map {}", map.join(" ")).unwrap();
        writeln!(
            out,
            "# node <period> <signal history> <report history> <consumption per income level>"
        )
        .unwrap();
        for t in 1..=self.horizon {
            for s in 0..signal_histories(self.n_signals, t) {
                let sig = format_signals(&decode_signals(self.n_signals, t - 1, s));
                for r in 0..(1usize << t) {
                    let rep = format_reports(&decode_reports(t, r));
                    let z: Vec<String> = self.z(t, s, r).iter().map(|c| num(*c)).collect();
                    writeln!(out, "node {t} {sig} {rep} {}", z.join(" ")).unwrap();
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Mechanism, MechanismError> {
        let err = |line: usize, detail: String| MechanismError::Parse { line, detail };
        let mut horizon = None;
        let mut income: Option<Vec<f64>> = None;
        let mut signal_map: Option<Vec<usize>> = None;
        let mut mech: Option<Mechanism> = None;
        let mut seen: Vec<Vec<bool>> = Vec::new();
        let mut header = false;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let rest: Vec<&str> = parts.collect();
            let floats = |v: &[&str]| -> Result<Vec<f64>, MechanismError> {
                v.iter()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|e| err(ln, format!("bad number {s:?}: {e}")))
                    })
                    .collect()
            };
            match key {
                "dyncontract-mechanism" => {
                    if rest != ["1"] {
                        return Err(err(ln, format!("unsupported version {rest:?}")));
                    }
                    header = true;
                }
                "horizon" => {
                    let h = rest
                        .first()
                        .and_then(|s| s.parse::<usize>().ok())
                        .filter(|h| *h >= 1)
                        .ok_or_else(|| err(ln, "horizon must be a positive integer".into()))?;
                    horizon = Some(h);
                }
                "income" => income = Some(floats(&rest)?),
                "signal_map" => {
                    let m = rest
                        .iter()
                        .map(|s| {
                            s.parse::<usize>()
                                .map_err(|e| err(ln, format!("bad signal {s:?}: {e}")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    signal_map = Some(m);
                }
                "node" => {
                    if mech.is_none() {
                        let (h, inc, map) = match (horizon, &income, &signal_map) {
                            (Some(h), Some(i), Some(m)) => (h, i.clone(), m.clone()),
                            _ => {
                                return Err(err(
                                    ln,
                                    "node record before horizon, income and signal_map".into(),
                                ))
                            }
                        };
                        if map.len() != inc.len() || inc.is_empty() {
                            return Err(err(ln, "signal_map and income lengths differ".into()));
                        }
                        let ns = map.iter().max().unwrap() + 1;
                        let mut flows = Vec::new();
                        for t in 1..=h {
                            let n = signal_histories(ns, t) << t;
                            flows.push(vec![f64::NAN; n * inc.len()]);
                            seen.push(vec![false; n]);
                        }
                        mech = Some(Mechanism {
                            horizon: h,
                            income: inc,
                            signal_map: map,
                            n_signals: ns,
                            flows,
                        });
                    }
                    let m = mech.as_mut().unwrap();
                    if rest.len() != 3 + m.income.len() {
                        return Err(err(ln, format!("expected {} fields", 3 + m.income.len())));
                    }
                    let t: usize = rest[0]
                        .parse()
                        .ok()
                        .filter(|t| *t >= 1 && *t <= m.horizon)
                        .ok_or_else(|| err(ln, format!("bad period {:?}", rest[0])))?;
                    let sig: Vec<usize> = if rest[1] == "-" {
                        Vec::new()
                    } else {
                        rest[1]
                            .split('.')
                            .map(|s| s.parse::<usize>().ok().filter(|v| *v < m.n_signals))
                            .collect::<Option<Vec<_>>>()
                            .ok_or_else(|| err(ln, format!("bad signal history {:?}", rest[1])))?
                    };
                    let rep: Vec<Type> = rest[2]
                        .chars()
                        .map(Type::from_symbol)
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| err(ln, format!("bad report history {:?}", rest[2])))?;
                    if sig.len() != t - 1 || rep.len() != t {
                        return Err(err(ln, "history lengths do not match the period".into()));
                    }
                    let s = sig.iter().fold(0, |a, v| a * m.n_signals + v);
                    let r = rep.iter().fold(0, |a, v| 2 * a + v.index());
                    let z = floats(&rest[3..])?;
                    if z.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
                        return Err(err(ln, "consumption must be finite and nonnegative".into()));
                    }
                    let idx = (s << t) + r;
                    if seen[t - 1][idx] {
                        return Err(err(ln, "duplicate node".into()));
                    }
                    seen[t - 1][idx] = true;
                    m.z_mut(t, s, r).copy_from_slice(&z);
                }
                other => return Err(err(ln, format!("unknown record {other:?}"))),
            }
        }
        if !header {
            return Err(err(1, "missing dyncontract-mechanism header".into()));
        }
        let m = mech.ok_or_else(|| err(text.lines().count(), "no node records".into()))?;
        for (t, s) in seen.iter().enumerate() {
            if let Some(k) = s.iter().position(|b| !b) {
                return Err(err(
                    text.lines().count(),
                    format!("missing node {k} in period {}", t + 1),
                ));
            }
        }
        Ok(m)
    }
}

/// Truth-telling continuation values `V_t(eta^{t-1}, theta_t)` for every public history.
#[derive(Clone, Debug)]
pub struct ValueTable {
    pub horizon: usize,
    n_signals: usize,
    values: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn compute(model: &ModelPrimitives, m: &Mechanism) -> Self {
        let ns = model.signals.count;
        let ny = model.income.len();
        let delta = model.delta();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); m.horizon];
        for t in (1..=m.horizon).rev() {
            let nsig = signal_histories(ns, t);
            let nrep = 1usize << (t - 1);
            let mut v = vec![0.0; nsig * nrep * 2];
            for s in 0..nsig {
                for r in 0..nrep {
                    for th in Type::ALL {
                        let rr = 2 * r + th.index();
                        let z = m.z(t, s, rr);
                        let p = model.income.probs(th);
                        let mut acc = 0.0;
                        for y in 0..ny {
                            let mut cont = 0.0;
                            if t < m.horizon {
                                let sc = s * ns + model.signals.map[y];
                                let next = &values[t];
                                for nt in Type::ALL {
                                    let i = ((sc * (nrep * 2)) + rr) * 2 + nt.index();
                                    cont += model.types.pi(th, nt) * next[i];
                                }
                            }
                            acc += p[y] * (model.prefs.u(z[y]) + delta * cont);
                        }
                        v[((s * nrep) + r) * 2 + th.index()] = acc;
                    }
                }
            }
            values[t - 1] = v;
        }
        ValueTable {
            horizon: m.horizon,
            n_signals: ns,
            values,
        }
    }

    /// `V_t` at signal history `s`, past reports `r` (length `t - 1`) and current type.
    pub fn get(&self, t: usize, s: usize, r: usize, theta: Type) -> f64 {
        let nrep = 1usize << (t - 1);
        self.values[t - 1][((s * nrep) + r) * 2 + theta.index()]
    }

    pub fn root(&self, theta: Type) -> f64 {
        self.get(1, 0, 0, theta)
    }

    /// Value from period `t + 1` of a type-`i` consumer who reports `h` at `(t, s, r)`.
    pub fn deviation_value(
        &self,
        model: &ModelPrimitives,
        t: usize,
        s: usize,
        r: usize,
        i: Type,
    ) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        let ns = self.n_signals;
        let p = model.signals.probs(i);
        (0..ns)
            .map(|phi| {
                p[phi]
                    * Type::ALL
                        .iter()
                        .map(|&j| {
                            model.types.pi(i, j) * self.get(t + 1, s * ns + phi, 2 * r + 1, j)
                        })
                        .sum::<f64>()
            })
            .sum()
    }
}

/// What the consumer has observed before reporting in the current period.
#[derive(Clone, Copy, Debug)]
pub struct PrivateHistory<'a> {
    pub incomes: &'a [usize],
    pub reports: &'a [Type],
    pub types: &'a [Type],
}

pub trait ReportingStrategy {
    fn report(&self, history: &PrivateHistory<'_>, current: Type) -> Type;
}

/// Always reports the true type.
#[derive(Clone, Copy, Debug, Default)]
pub struct Truthful;

impl ReportingStrategy for Truthful {
    fn report(&self, _: &PrivateHistory<'_>, current: Type) -> Type {
        current
    }
}

/// Strategy defined by a closure.
pub struct FnStrategy<F>(pub F);

impl<F> ReportingStrategy for FnStrategy<F>
where
    F: Fn(&PrivateHistory<'_>, Type) -> Type,
{
    fn report(&self, h: &PrivateHistory<'_>, c: Type) -> Type {
        (self.0)(h, c)
    }
}

/// Strategy that depends only on the public history and the current type;
/// unlisted states are reported truthfully.
#[derive(Clone, Debug, Default)]
pub struct PublicStateStrategy {
    pub signal_map: Vec<usize>,
    pub n_signals: usize,
    /// `(t, signal rank, report rank, type) -> report`.
    pub choices: HashMap<(usize, usize, usize, Type), Type>,
}

impl ReportingStrategy for PublicStateStrategy {
    fn report(&self, h: &PrivateHistory<'_>, current: Type) -> Type {
        let t = h.reports.len() + 1;
        let s = h
            .incomes
            .iter()
            .fold(0, |a, y| a * self.n_signals + self.signal_map[*y]);
        let r = h.reports.iter().fold(0, |a, v| 2 * a + v.index());
        *self.choices.get(&(t, s, r, current)).unwrap_or(&current)
    }
}

/// Expected discounted utility of following `strategy` with initial type `theta1`,
/// by exact enumeration of type and income paths.
pub fn consumer_value(
    model: &ModelPrimitives,
    m: &Mechanism,
    strategy: &dyn ReportingStrategy,
    theta1: Type,
) -> Result<f64, MechanismError> {
    m.check_shape(model)?;
    let mut incomes = Vec::with_capacity(m.horizon);
    let mut reports = Vec::with_capacity(m.horizon);
    let mut types = Vec::with_capacity(m.horizon);
    Ok(walk(
        model,
        m,
        strategy,
        theta1,
        0,
        0,
        &mut incomes,
        &mut reports,
        &mut types,
    ))
}

#[allow(clippy::too_many_arguments)]
fn walk(
    model: &ModelPrimitives,
    m: &Mechanism,
    strategy: &dyn ReportingStrategy,
    theta: Type,
    s: usize,
    r: usize,
    incomes: &mut Vec<usize>,
    reports: &mut Vec<Type>,
    types: &mut Vec<Type>,
) -> f64 {
    let t = reports.len() + 1;
    let rep = strategy.report(
        &PrivateHistory {
            incomes,
            reports,
            types,
        },
        theta,
    );
    let rr = 2 * r + rep.index();
    let z = m.z(t, s, rr).to_vec();
    let p = model.income.probs(theta);
    let mut acc = 0.0;
    for y in 0..z.len() {
        let mut cont = 0.0;
        if t < m.horizon {
            incomes.push(y);
            reports.push(rep);
            types.push(theta);
            let sc = s * model.signals.count + model.signals.map[y];
            for nt in Type::ALL {
                let pr = model.types.pi(theta, nt);
                if pr > 0.0 {
                    cont += pr * walk(model, m, strategy, nt, sc, rr, incomes, reports, types);
                }
            }
            incomes.pop();
            reports.pop();
            types.pop();
        }
        acc += p[y] * (model.prefs.u(z[y]) + model.delta() * cont);
    }
    acc
}

/// Truth-telling expected discounted profit: `(Pi, Pi_l, Pi_h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Profit {
    pub total: f64,
    pub low: f64,
    pub high: f64,
}

pub fn firm_profit(model: &ModelPrimitives, m: &Mechanism) -> Profit {
    let ns = model.signals.count;
    let delta = model.delta();
    let mut next: Vec<f64> = Vec::new();
    for t in (1..=m.horizon).rev() {
        let nsig = signal_histories(ns, t);
        let nrep = 1usize << (t - 1);
        let mut cur = vec![0.0; nsig * nrep * 2];
        for s in 0..nsig {
            for r in 0..nrep {
                for th in Type::ALL {
                    let rr = 2 * r + th.index();
                    let z = m.z(t, s, rr);
                    let p = model.income.probs(th);
                    let mut acc = 0.0;
                    for y in 0..z.len() {
                        let mut cont = 0.0;
                        if t < m.horizon {
                            let sc = s * ns + model.signals.map[y];
                            for nt in Type::ALL {
                                let i = ((sc * nrep * 2) + rr) * 2 + nt.index();
                                cont += model.types.pi(th, nt) * next[i];
                            }
                        }
                        acc += p[y] * (model.income.levels[y] - z[y] + delta * cont);
                    }
                    cur[((s * nrep) + r) * 2 + th.index()] = acc;
                }
            }
        }
        next = cur;
    }
    let (low, high) = (next[0], next[1]);
    Profit {
        total: model.types.pi_init[0] * low + model.types.pi_init[1] * high,
        low,
        high,
    }
}

/// Outcome of the exhaustive incentive search.
#[derive(Clone, Debug)]
pub struct IcReport {
    /// Largest gain over truth-telling across initial types.
    pub max_violation: f64,
    /// Best attainable value per initial type (index by `Type::index`).
    pub best_value: [f64; 2],
    pub truthful_value: [f64; 2],
    pub evaluations: u64,
    /// False when the budget forced a restricted search.
    pub exhaustive: bool,
    /// A maximizing strategy.
    pub best_strategy: PublicStateStrategy,
}

impl IcReport {
    pub fn is_ic(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

pub const DEFAULT_IC_BUDGET: u64 = 10_000_000;

/// Maximum gain from any pure reporting strategy.
///
/// Private histories sharing the public history and the current type face the
/// same continuation problem, so the search over strategy trees is carried out on
/// those equivalence classes. When that exceeds `budget` evaluations, only single
/// deviations from truthful histories are searched and the report is flagged.
pub fn check_ic_exhaustive(
    model: &ModelPrimitives,
    m: &Mechanism,
    budget: u64,
) -> Result<IcReport, MechanismError> {
    m.check_shape(model)?;
    let ns = model.signals.count;
    let ny = model.income.len() as u64;
    let needed: u64 = (1..=m.horizon)
        .map(|t| (signal_histories(ns, t) as u64) * (1u64 << (t - 1)) * 4 * ny)
        .sum();
    let values = ValueTable::compute(model, m);
    let truthful_value = [values.root(Type::Low), values.root(Type::High)];
    let mut strat = PublicStateStrategy {
        signal_map: model.signals.map.clone(),
        n_signals: ns,
        choices: HashMap::new(),
    };
    if needed <= budget {
        let delta = model.delta();
        let mut next: Vec<f64> = Vec::new();
        let mut evaluations = 0u64;
        for t in (1..=m.horizon).rev() {
            let nsig = signal_histories(ns, t);
            let nrep = 1usize << (t - 1);
            let mut cur = vec![0.0; nsig * nrep * 2];
            for s in 0..nsig {
                for r in 0..nrep {
                    for th in Type::ALL {
                        let p = model.income.probs(th);
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = th;
                        // Truthful report first so ties keep truth-telling.
                        for rep in [th, flip(th)] {
                            let rr = 2 * r + rep.index();
                            let z = m.z(t, s, rr);
                            let mut acc = 0.0;
                            for y in 0..z.len() {
                                let mut cont = 0.0;
                                if t < m.horizon {
                                    let sc = s * ns + model.signals.map[y];
                                    for nt in Type::ALL {
                                        let i = ((sc * nrep * 2) + rr) * 2 + nt.index();
                                        cont += model.types.pi(th, nt) * next[i];
                                    }
                                }
                                acc += p[y] * (model.prefs.u(z[y]) + delta * cont);
                                evaluations += 1;
                            }
                            if acc > best {
                                best = acc;
                                arg = rep;
                            }
                        }
                        if arg != th {
                            strat.choices.insert((t, s, r, th), arg);
                        }
                        cur[((s * nrep) + r) * 2 + th.index()] = best;
                    }
                }
            }
            next = cur;
        }
        let best_value = [next[0], next[1]];
        let max_violation = (0..2)
            .map(|i| best_value[i] - truthful_value[i])
            .fold(f64::NEG_INFINITY, f64::max);
        return Ok(IcReport {
            max_violation,
            best_value,
            truthful_value,
            evaluations,
            exhaustive: true,
            best_strategy: strat,
        });
    }
    // Restricted search: one misreport at a truthful history, truthful afterwards.
    let mut evaluations = 0u64;
    let mut best_gain = [0.0f64; 2];
    let mut best_choice: [Option<(usize, usize, usize, Type)>; 2] = [None, None];
    let mut stack = vec![(1usize, 0usize, 0usize, 1.0f64, Type::Low, Type::Low)];
    stack.push((1, 0, 0, 1.0, Type::High, Type::High));
    let delta = model.delta();
    while let Some((t, s, r, weight, th, root)) = stack.pop() {
        if evaluations >= budget {
            break;
        }
        let rr_true = 2 * r + th.index();
        let rr_dev = 2 * r + flip(th).index();
        let flow = |rr: usize| -> f64 {
            let z = m.z(t, s, rr);
            model
                .income
                .probs(th)
                .iter()
                .zip(z)
                .map(|(p, c)| p * model.prefs.u(*c))
                .sum()
        };
        let cont = |rr: usize| -> f64 {
            if t >= m.horizon {
                return 0.0;
            }
            let p = model.signals.probs(th);
            (0..ns)
                .map(|phi| {
                    p[phi]
                        * Type::ALL
                            .iter()
                            .map(|&j| {
                                model.types.pi(th, j) * values.get(t + 1, s * ns + phi, rr, j)
                            })
                            .sum::<f64>()
                })
                .sum()
        };
        let gain = (flow(rr_dev) + delta * cont(rr_dev)) - (flow(rr_true) + delta * cont(rr_true));
        evaluations += 2 * ny;
        let discount = delta.powi((t - 1) as i32);
        if weight * discount * gain > best_gain[root.index()] {
            best_gain[root.index()] = weight * discount * gain;
            best_choice[root.index()] = Some((t, s, r, th));
        }
        if t < m.horizon {
            let p = model.signals.probs(th);
            for phi in 0..ns {
                for nt in Type::ALL {
                    let w = weight * p[phi] * model.types.pi(th, nt);
                    if w > 0.0 {
                        stack.push((t + 1, s * ns + phi, rr_true, w, nt, root));
                    }
                }
            }
        }
    }
    for c in best_choice.iter().flatten() {
        strat.choices.insert(*c, flip(c.3));
    }
    Ok(IcReport {
        max_violation: best_gain[0].max(best_gain[1]),
        best_value: [
            truthful_value[0] + best_gain[0],
            truthful_value[1] + best_gain[1],
        ],
        truthful_value,
        evaluations,
        exhaustive: false,
        best_strategy: strat,
    })
}

fn flip(t: Type) -> Type {
    match t {
        Type::Low => Type::High,
        Type::High => Type::Low,
    }
}

/// One-shot incentive slack at an all-`h` history.
#[derive(Clone, Debug, PartialEq)]
pub struct OsicSlack {
    pub t: usize,
    pub signal_rank: usize,
    pub signals: Vec<usize>,
    /// Truthful low-type value minus the value of reporting `h` once.
    pub slack: f64,
    pub binding: bool,
    pub violated: bool,
}

pub const BINDING_TOL: f64 = 1e-7;

/// Slack of every one-shot critical deviation.
pub fn check_osic(model: &ModelPrimitives, m: &Mechanism, tol: f64) -> Vec<OsicSlack> {
    let v = ValueTable::compute(model, m);
    let ns = model.signals.count;
    let mut out = Vec::new();
    for t in 1..=m.horizon {
        let r = all_high(t - 1);
        for s in 0..signal_histories(ns, t) {
            let z = m.z(t, s, 2 * r + 1);
            let flow: f64 = model
                .income
                .p_l
                .iter()
                .zip(z)
                .map(|(p, c)| p * model.prefs.u(*c))
                .sum();
            let dev = flow + model.delta() * v.deviation_value(model, t, s, r, Type::Low);
            let slack = v.get(t, s, r, Type::Low) - dev;
            out.push(OsicSlack {
                t,
                signal_rank: s,
                signals: decode_signals(ns, t - 1, s),
                slack,
                binding: slack.abs() <= tol,
                violated: slack < -tol,
            });
        }
    }
    out
}

/// Lower likelihood incomes never receive less consumption, within `tol`.
pub fn check_flow_monotonicity(model: &ModelPrimitives, z: &FlowContract, tol: f64) -> bool {
    let l = &model.income.likelihood;
    for a in 0..z.z.len() {
        for b in 0..z.z.len() {
            if l[b] > l[a] && z.z[b] > z.z[a] + tol {
                return false;
            }
        }
    }
    true
}

/// Result of a monotonicity check with its smallest margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonotonicityCheck {
    pub holds: bool,
    pub margin: f64,
}

/// Signal-ordered continuation values after an `h` report at `(t, s, r)`:
/// a signal with a lower likelihood ratio must give a low type at least as much.
pub fn check_csm(
    model: &ModelPrimitives,
    v: &ValueTable,
    t: usize,
    s: usize,
    r: usize,
    tol: f64,
) -> MonotonicityCheck {
    let ns = model.signals.count;
    if t >= v.horizon {
        return MonotonicityCheck {
            holds: true,
            margin: f64::INFINITY,
        };
    }
    let w: Vec<f64> = (0..ns)
        .map(|phi| {
            let sc = s * ns + phi;
            model.types.pi(Type::Low, Type::High) * v.get(t + 1, sc, 2 * r + 1, Type::High)
                + model.types.pi(Type::Low, Type::Low) * v.get(t + 1, sc, 2 * r + 1, Type::Low)
        })
        .collect();
    let l = &model.signals.likelihood;
    let mut margin = f64::INFINITY;
    for a in 0..ns {
        for b in 0..ns {
            if a != b && l[b] <= l[a] {
                margin = margin.min(w[b] - w[a]);
            }
        }
    }
    MonotonicityCheck {
        holds: margin >= -tol,
        margin,
    }
}

/// Strictly higher continuation value for the `h` type after an `h` report at `(t, s, r)`.
pub fn check_ctm(
    model: &ModelPrimitives,
    v: &ValueTable,
    t: usize,
    s: usize,
    r: usize,
    strict_tol: f64,
) -> MonotonicityCheck {
    let ns = model.signals.count;
    if t >= v.horizon {
        return MonotonicityCheck {
            holds: true,
            margin: f64::INFINITY,
        };
    }
    let margin = (0..ns)
        .map(|phi| {
            let sc = s * ns + phi;
            v.get(t + 1, sc, 2 * r + 1, Type::High) - v.get(t + 1, sc, 2 * r + 1, Type::Low)
        })
        .fold(f64::INFINITY, f64::min);
    MonotonicityCheck {
        holds: margin > strict_tol,
        margin,
    }
}

/// Largest population variance of consumption across the subtree after any first `l` report.
pub fn post_low_variance(m: &Mechanism) -> f64 {
    let ns = m.n_signals;
    let mut worst = 0.0f64;
    for tau in 1..=m.horizon {
        let r0 = 2 * all_high(tau - 1);
        for s0 in 0..signal_histories(ns, tau) {
            let mut vals = Vec::new();
            for t in tau..=m.horizon {
                let k = t - tau;
                let nsk = ns.pow(k as u32);
                for sx in 0..nsk {
                    let s = s0 * nsk + sx;
                    for rx in 0..(1usize << k) {
                        let r = (r0 << k) + rx;
                        vals.extend_from_slice(m.z(t, s, r));
                    }
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            worst = worst.max(var);
        }
    }
    worst
}
