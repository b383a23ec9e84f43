//! Economic primitives: preferences, the Markov type process, income
//! distributions, signal structures and the elementary evaluation formulas.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Private risk type of the consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Type {
    Low,
    High,
}

impl Type {
    pub const ALL: [Type; 2] = [Type::Low, Type::High];

    pub fn index(self) -> usize {
        match self {
            Type::Low => 0,
            Type::High => 1,
        }
    }

    pub fn from_index(i: usize) -> Type {
        if i == 0 {
            Type::Low
        } else {
            Type::High
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Type::Low => 'l',
            Type::High => 'h',
        }
    }

    pub fn from_symbol(c: char) -> Option<Type> {
        match c {
            'l' => Some(Type::Low),
            'h' => Some(Type::High),
            _ => None,
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("negative consumption {0} is outside the utility domain")]
    NegativeConsumption(f64),
    #[error("income level {0} is not in the support")]
    UnknownIncome(f64),
    #[error("signal label {0} is not in the signal set")]
    UnknownSignal(usize),
    #[error("contract has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("utility {value} per period is outside the range of u ({detail})")]
    OutOfRange { value: f64, detail: String },
    #[error("invalid model: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// A failed model invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

/// User-supplied utility family. `psi` is the inverse of `u`.
pub trait UtilityFunction: Send + Sync + fmt::Debug {
    fn u(&self, c: f64) -> f64;
    fn u_prime(&self, c: f64) -> f64;
    fn u_second(&self, c: f64) -> f64;
    fn psi(&self, x: f64) -> f64;
    fn psi_prime(&self, x: f64) -> f64;
    fn psi_second(&self, x: f64) -> f64;
    fn psi_third(&self, x: f64) -> f64;
    /// Solves `psi'(x) = g`; returns negative infinity when no solution exists
    /// above the bottom of the utility range.
    fn psi_prime_inv(&self, g: f64) -> f64;
    /// `u(0)` when finite.
    fn utility_at_zero(&self) -> Option<f64>;
    /// Supremum of `u` when bounded above.
    fn utility_sup(&self) -> Option<f64>;
}

/// Additive constant of the CRRA family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrraNormalization {
    /// `u(c) = (c^(1-rho) - 1) / (1 - rho)`.
    Standard,
    /// `u(c) = c^(1-rho) / (1 - rho)`; for `rho = 1/2` this is `2 sqrt(c)`.
    Power,
}

#[derive(Clone, Debug)]
pub enum UtilityFamily {
    Crra {
        rho: f64,
        normalization: CrraNormalization,
    },
    /// `u(c) = (1 - exp(-alpha c)) / alpha`.
    Cara {
        alpha: f64,
    },
    Custom(Arc<dyn UtilityFunction>),
}

/// Sign class of `psi'''` on a sampled range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Psi3Sign {
    PositivePsi3,
    ZeroPsi3,
    NegativePsi3,
    Mixed,
}

impl fmt::Display for Psi3Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Psi3Sign::PositivePsi3 => "PositivePsi3",
            Psi3Sign::ZeroPsi3 => "ZeroPsi3",
            Psi3Sign::NegativePsi3 => "NegativePsi3",
            Psi3Sign::Mixed => "Mixed",
        };
        f.write_str(s)
    }
}

/// Utility family, discount factor and the consumption floor used when `u(0)` is not finite.
#[derive(Clone, Debug)]
pub struct Preferences {
    pub family: UtilityFamily,
    pub delta: f64,
    pub eps_c: f64,
}

impl Preferences {
    pub const DEFAULT_EPS_C: f64 = 1e-9;

    pub fn crra(rho: f64, normalization: CrraNormalization, delta: f64) -> Self {
        Preferences {
            family: UtilityFamily::Crra { rho, normalization },
            delta,
            eps_c: Self::DEFAULT_EPS_C,
        }
    }

    pub fn cara(alpha: f64, delta: f64) -> Self {
        Preferences {
            family: UtilityFamily::Cara { alpha },
            delta,
            eps_c: Self::DEFAULT_EPS_C,
        }
    }

    pub fn custom(f: Arc<dyn UtilityFunction>, delta: f64) -> Self {
        Preferences {
            family: UtilityFamily::Custom(f),
            delta,
            eps_c: Self::DEFAULT_EPS_C,
        }
    }

    fn crra_shift(rho: f64, n: CrraNormalization) -> f64 {
        match n {
            CrraNormalization::Standard => 1.0 / (1.0 - rho),
            CrraNormalization::Power => 0.0,
        }
    }

    pub fn u(&self, c: f64) -> f64 {
        match &self.family {
            UtilityFamily::Crra { rho, normalization } => {
                let k = 1.0 - rho;
                c.powf(k) / k - Self::crra_shift(*rho, *normalization)
            }
            UtilityFamily::Cara { alpha } => -(-alpha * c).exp_m1() / alpha,
            UtilityFamily::Custom(f) => f.u(c),
        }
    }

    pub fn u_prime(&self, c: f64) -> f64 {
        match &self.family {
            UtilityFamily::Crra { rho, .. } => c.powf(-rho),
            UtilityFamily::Cara { alpha } => (-alpha * c).exp(),
            UtilityFamily::Custom(f) => f.u_prime(c),
        }
    }

    pub fn u_second(&self, c: f64) -> f64 {
        match &self.family {
            UtilityFamily::Crra { rho, .. } => -rho * c.powf(-rho - 1.0),
            UtilityFamily::Cara { alpha } => -alpha * (-alpha * c).exp(),
            UtilityFamily::Custom(f) => f.u_second(c),
        }
    }

    /// Inverse utility: consumption delivering utility `x`.
    pub fn psi(&self, x: f64) -> f64 {
        match &self.family {
            UtilityFamily::Crra { rho, normalization } => {
                let k = 1.0 - rho;
                let y = k * (x + Self::crra_shift(*rho, *normalization));
                if y > 0.0 {
                    y.powf(1.0 / k)
                } else if *rho < 1.0 {
                    if y == 0.0 {
                        0.0
                    } else {
                        f64::NAN
                    }
                } else {
                    f64::INFINITY
                }
            }
            UtilityFamily::Cara { alpha } => {
                let a = 1.0 - alpha * x;
                if a > 0.0 {
                    -(-alpha * x).ln_1p() / alpha
                } else {
                    f64::INFINITY
                }
            }
            UtilityFamily::Custom(f) => f.psi(x),
        }
    }

    pub fn psi_prime(&self, x: f64) -> f64 {
        match &self.family {
            UtilityFamily::Crra { rho, normalization } => {
                let k = 1.0 - rho;
                let y = k * (x + Self::crra_shift(*rho, *normalization));
                y.max(0.0).powf(rho / k)
            }
            UtilityFamily::Cara { alpha } => 1.0 / (1.0 - alpha * x),
            UtilityFamily::Custom(f) => f.psi_prime(x),
        }
    }

    pub fn psi_second(&self, x: f64) -> f64 {
        match &self.family {
            UtilityFamily::Crra { rho, normalization } => {
                let k = 1.0 - rho;
                let y = k * (x + Self::crra_shift(*rho, *normalization));
                rho * y.powf(1.0 / k - 2.0)
            }
            UtilityFamily::Cara { alpha } => {
                let a = 1.0 - alpha * x;
                alpha / (a * a)
            }
            UtilityFamily::Custom(f) => f.psi_second(x),
        }
    }

    pub fn psi_third(&self, x: f64) -> f64 {
        match &self.family {
            UtilityFamily::Crra { rho, normalization } => {
                let k = 1.0 - rho;
                let y = k * (x + Self::crra_shift(*rho, *normalization));
                rho * (2.0 * rho - 1.0) * y.powf(1.0 / k - 3.0)
            }
            UtilityFamily::Cara { alpha } => {
                let a = 1.0 - alpha * x;
                2.0 * alpha * alpha / (a * a * a)
            }
            UtilityFamily::Custom(f) => f.psi_third(x),
        }
    }

    /// Utility level with marginal cost `g`, or negative infinity if none exists.
    pub fn psi_prime_inv(&self, g: f64) -> f64 {
        match &self.family {
            UtilityFamily::Crra { rho, normalization } => {
                if g <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let k = 1.0 - rho;
                g.powf(k / rho) / k - Self::crra_shift(*rho, *normalization)
            }
            UtilityFamily::Cara { alpha } => {
                if g <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                (1.0 - 1.0 / g) / alpha
            }
            UtilityFamily::Custom(f) => f.psi_prime_inv(g),
        }
    }

    /// `u(0)` when finite.
    pub fn u0(&self) -> Option<f64> {
        match &self.family {
            UtilityFamily::Crra { rho, normalization } => {
                (*rho < 1.0).then(|| -Self::crra_shift(*rho, *normalization))
            }
            UtilityFamily::Cara { .. } => Some(0.0),
            UtilityFamily::Custom(f) => f.utility_at_zero(),
        }
    }

    /// Supremum of `u` when bounded above.
    pub fn utility_sup(&self) -> Option<f64> {
        match &self.family {
            UtilityFamily::Crra { rho, normalization } => {
                (*rho > 1.0).then(|| -Self::crra_shift(*rho, *normalization))
            }
            UtilityFamily::Cara { alpha } => Some(1.0 / alpha),
            UtilityFamily::Custom(f) => f.utility_sup(),
        }
    }

    /// Smallest admissible consumption: 0 when `u(0)` is finite, otherwise `eps_c`.
    pub fn consumption_floor(&self) -> f64 {
        if self.u0().is_some() {
            0.0
        } else {
            self.eps_c
        }
    }

    /// Smallest admissible flow utility.
    pub fn utility_floor(&self) -> f64 {
        self.u0().unwrap_or_else(|| self.u(self.eps_c))
    }

    /// Classifies the sign of `psi'''` on `n` equally spaced points of `[lo, hi]`.
    pub fn supermodularity_certificate(&self, lo: f64, hi: f64, n: usize) -> Psi3Sign {
        let n = n.max(2);
        let (mut pos, mut neg, mut zero) = (false, false, false);
        for i in 0..n {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let d3 = self.psi_third(x);
            let scale = 1e-12 * (1.0 + self.psi_second(x).abs());
            if d3.abs() <= scale {
                zero = true;
            } else if d3 > 0.0 {
                pos = true;
            } else {
                neg = true;
            }
        }
        match (pos, neg, zero) {
            (true, false, false) => Psi3Sign::PositivePsi3,
            (false, true, false) => Psi3Sign::NegativePsi3,
            (false, false, true) => Psi3Sign::ZeroPsi3,
            _ => Psi3Sign::Mixed,
        }
    }

    fn validate_into(&self, out: &mut Vec<Violation>) {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            out.push(Violation {
                invariant: "discount factor",
                detail: format!("delta = {} not in (0,1)", self.delta),
            });
        }
        match &self.family {
            UtilityFamily::Crra { rho, .. } => {
                if !(*rho > 0.0) || *rho == 1.0 || !rho.is_finite() {
                    out.push(Violation {
                        invariant: "utility parameters",
                        detail: format!("CRRA requires rho > 0 and rho != 1, got {rho}"),
                    });
                    return;
                }
            }
            UtilityFamily::Cara { alpha } => {
                if !(*alpha > 0.0) || !alpha.is_finite() {
                    out.push(Violation {
                        invariant: "utility parameters",
                        detail: format!("CARA requires alpha > 0, got {alpha}"),
                    });
                    return;
                }
            }
            UtilityFamily::Custom(_) => {}
        }
        if !(self.eps_c > 0.0) {
            out.push(Violation {
                invariant: "utility parameters",
                detail: format!("consumption floor eps_c = {} must be positive", self.eps_c),
            });
        }
        for i in 0..=40 {
            let c = 0.05 * 1.25f64.powi(i);
            let (d1, d2) = (self.u_prime(c), self.u_second(c));
            if self.utility_sup().is_some_and(|sup| self.u(c) >= sup) {
                // Saturated in floating point; nothing further to sample.
                break;
            }
            if !(d1 > 0.0 && d2 < 0.0) {
                out.push(Violation {
                    invariant: "utility shape",
                    detail: format!("u'({c}) = {d1}, u''({c}) = {d2}"),
                });
                break;
            }
            let back = self.psi(self.u(c));
            let cond = 64.0 * f64::EPSILON * (1.0 + self.u(c).abs()) / d1;
            if !((back - c).abs() <= 1e-10 * c.max(1.0) + cond) {
                out.push(Violation {
                    invariant: "utility inverse",
                    detail: format!("psi(u({c})) = {back}"),
                });
                break;
            }
        }
    }
}

/// Two-state Markov chain over types. Index 0 is `l`, index 1 is `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeProcess {
    /// Initial distribution `(pi_l, pi_h)`; also the market shares `(mu_l, mu_h)`.
    pub pi_init: [f64; 2],
    /// `transition[i][j]` is the probability of moving from type `i` to type `j`.
    pub transition: [[f64; 2]; 2],
}

impl TypeProcess {
    /// Builds the chain from the persistence probabilities and the low-type share.
    pub fn new(pi_hh: f64, pi_ll: f64, mu_l: f64) -> Self {
        TypeProcess {
            pi_init: [mu_l, 1.0 - mu_l],
            transition: [[pi_ll, 1.0 - pi_ll], [1.0 - pi_hh, pi_hh]],
        }
    }

    pub fn pi(&self, from: Type, to: Type) -> f64 {
        self.transition[from.index()][to.index()]
    }

    pub fn initial(&self, t: Type) -> f64 {
        self.pi_init[t.index()]
    }

    /// Market shares; the same pair as the initial distribution.
    pub fn mu_shares(&self) -> [f64; 2] {
        self.pi_init
    }

    fn validate_into(&self, out: &mut Vec<Violation>) {
        for (i, row) in self.transition.iter().enumerate() {
            let ok = row.iter().all(|p| (0.0..=1.0).contains(p))
                && (row[0] + row[1] - 1.0).abs() <= 1e-12;
            if !ok {
                out.push(Violation {
                    invariant: "row-stochastic transition",
                    detail: format!("row {} = {:?}", Type::from_index(i), row),
                });
            }
        }
        let p = self.pi_init;
        if !(p.iter().all(|x| (0.0..=1.0).contains(x)) && (p[0] + p[1] - 1.0).abs() <= 1e-12) {
            out.push(Violation {
                invariant: "initial distribution",
                detail: format!("{p:?}"),
            });
        }
        let (hh, lh) = (
            self.pi(Type::High, Type::High),
            self.pi(Type::Low, Type::High),
        );
        let (ll, hl) = (
            self.pi(Type::Low, Type::Low),
            self.pi(Type::High, Type::Low),
        );
        if !(hh > lh && ll > hl) {
            out.push(Violation {
                invariant: "persistence",
                detail: format!("need pi_hh > pi_lh and pi_ll > pi_hl, got pi_hh={hh}, pi_lh={lh}, pi_ll={ll}, pi_hl={hl}"),
            });
        }
    }
}

/// Finite income support with the two type-conditional distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct IncomeModel {
    pub levels: Vec<f64>,
    pub p_l: Vec<f64>,
    pub p_h: Vec<f64>,
    /// `p_l(y) / p_h(y)`.
    pub likelihood: Vec<f64>,
}

impl IncomeModel {
    pub fn new(levels: Vec<f64>, p_l: Vec<f64>, p_h: Vec<f64>) -> Self {
        let likelihood = p_l.iter().zip(&p_h).map(|(l, h)| l / h).collect();
        IncomeModel {
            levels,
            p_l,
            p_h,
            likelihood,
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn probs(&self, t: Type) -> &[f64] {
        match t {
            Type::Low => &self.p_l,
            Type::High => &self.p_h,
        }
    }

    pub fn mean(&self, t: Type) -> f64 {
        self.probs(t)
            .iter()
            .zip(&self.levels)
            .map(|(p, y)| p * y)
            .sum()
    }

    /// `sum_y p_l(y)^2 / p_h(y)`.
    pub fn l2(&self) -> f64 {
        self.p_l.iter().zip(&self.p_h).map(|(l, h)| l * l / h).sum()
    }

    pub fn index_of(&self, y: f64) -> Result<usize, ModelError> {
        self.levels
            .iter()
            .position(|v| *v == y)
            .ok_or(ModelError::UnknownIncome(y))
    }

    fn validate_into(&self, out: &mut Vec<Violation>) {
        let n = self.levels.len();
        if n == 0 || self.p_l.len() != n || self.p_h.len() != n {
            out.push(Violation {
                invariant: "income probability vector",
                detail: format!(
                    "{} levels, {} low-type and {} high-type probabilities",
                    n,
                    self.p_l.len(),
                    self.p_h.len()
                ),
            });
            return;
        }
        if self.levels.iter().any(|y| !(*y >= 0.0) || !y.is_finite()) {
            out.push(Violation {
                invariant: "nonnegative income",
                detail: format!("{:?}", self.levels),
            });
        }
        if self.levels.windows(2).any(|w| !(w[1] > w[0])) {
            out.push(Violation {
                invariant: "strictly increasing income",
                detail: format!("{:?}", self.levels),
            });
        }
        for t in Type::ALL {
            let p = self.probs(t);
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-12 || p.iter().any(|x| !(*x >= 0.0)) {
                out.push(Violation {
                    invariant: "income probability vector",
                    detail: format!("p_{t} = {p:?} sums to {s}"),
                });
            }
            if p.iter().any(|x| !(*x > 0.0)) {
                out.push(Violation {
                    invariant: "full support",
                    detail: format!("p_{t} = {p:?}"),
                });
            }
        }
        if !(self.mean(Type::Low) < self.mean(Type::High)) {
            out.push(Violation {
                invariant: "income first-moment ordering",
                detail: format!(
                    "E_l y = {} is not below E_h y = {}",
                    self.mean(Type::Low),
                    self.mean(Type::High)
                ),
            });
        }
    }
}

/// Coarsening of incomes into publicly contractible signals.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalStructure {
    /// `map[y]` is the signal label of income index `y`.
    pub map: Vec<usize>,
    pub count: usize,
    pub p_l: Vec<f64>,
    pub p_h: Vec<f64>,
    pub likelihood: Vec<f64>,
}

impl SignalStructure {
    pub fn from_map(map: Vec<usize>, income: &IncomeModel) -> Self {
        let count = map.iter().copied().max().map_or(0, |m| m + 1);
        let mut p_l = vec![0.0; count];
        let mut p_h = vec![0.0; count];
        for (y, &s) in map.iter().enumerate() {
            if y < income.len() {
                p_l[s] += income.p_l[y];
                p_h[s] += income.p_h[y];
            }
        }
        let likelihood = p_l.iter().zip(&p_h).map(|(l, h)| l / h).collect();
        SignalStructure {
            map,
            count,
            p_l,
            p_h,
            likelihood,
        }
    }

    /// A single uninformative signal.
    pub fn realization_independent(income: &IncomeModel) -> Self {
        Self::from_map(vec![0; income.len()], income)
    }

    /// Every income level is its own signal.
    pub fn fully_contingent(income: &IncomeModel) -> Self {
        Self::from_map((0..income.len()).collect(), income)
    }

    pub fn probs(&self, t: Type) -> &[f64] {
        match t {
            Type::Low => &self.p_l,
            Type::High => &self.p_h,
        }
    }

    pub fn is_realization_independent(&self) -> bool {
        self.count == 1
    }

    fn validate_into(&self, income: &IncomeModel, out: &mut Vec<Violation>) {
        if self.map.len() != income.len() {
            out.push(Violation {
                invariant: "signal surjectivity",
                detail: format!(
                    "signal map has {} entries for {} income levels",
                    self.map.len(),
                    income.len()
                ),
            });
            return;
        }
        for s in 0..self.count {
            if !self.map.contains(&s) {
                out.push(Violation {
                    invariant: "signal surjectivity",
                    detail: format!("signal {s} has an empty preimage"),
                });
            }
        }
    }
}

/// Income-contingent final consumption, one entry per income level.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowContract {
    pub z: Vec<f64>,
}

impl FlowContract {
    pub fn new(z: Vec<f64>) -> Self {
        FlowContract { z }
    }

    pub fn constant(c: f64, n: usize) -> Self {
        FlowContract { z: vec![c; n] }
    }

    /// Utility-space image `u(z(y))`.
    pub fn utilities(&self, prefs: &Preferences) -> Vec<f64> {
        self.z.iter().map(|c| prefs.u(*c)).collect()
    }
}

/// All primitives of the insurance environment.
#[derive(Clone, Debug)]
pub struct ModelPrimitives {
    pub prefs: Preferences,
    pub types: TypeProcess,
    pub income: IncomeModel,
    pub signals: SignalStructure,
}

impl ModelPrimitives {
    pub fn new(
        prefs: Preferences,
        types: TypeProcess,
        income: IncomeModel,
        signals: SignalStructure,
    ) -> Self {
        ModelPrimitives {
            prefs,
            types,
            income,
            signals,
        }
    }

    /// Builds the model and rejects it if any invariant fails.
    pub fn validated(
        prefs: Preferences,
        types: TypeProcess,
        income: IncomeModel,
        signals: SignalStructure,
    ) -> Result<Self, ModelError> {
        let m = Self::new(prefs, types, income, signals);
        let v = m.validate();
        if v.is_empty() {
            Ok(m)
        } else {
            Err(ModelError::Invalid(v))
        }
    }

    /// Default repository fixture: `Y = {1, 4}`, `u(c) = 2 sqrt(c)`, fully contingent signals.
    pub fn fixture() -> Self {
        let income = IncomeModel::new(vec![1.0, 4.0], vec![0.4, 0.6], vec![0.1, 0.9]);
        let signals = SignalStructure::fully_contingent(&income);
        ModelPrimitives::new(
            Preferences::crra(0.5, CrraNormalization::Power, 0.9),
            TypeProcess::new(0.8, 0.7, 0.5),
            income,
            signals,
        )
    }

    /// Same model with a different signal map.
    pub fn with_signals(&self, map: Vec<usize>) -> Self {
        let mut m = self.clone();
        m.signals = SignalStructure::from_map(map, &self.income);
        m
    }

    pub fn with_realization_independent(&self) -> Self {
        self.with_signals(vec![0; self.income.len()])
    }

    pub fn with_fully_contingent(&self) -> Self {
        self.with_signals((0..self.income.len()).collect())
    }

    /// Every failed invariant; empty when the model is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        self.prefs.validate_into(&mut out);
        self.types.validate_into(&mut out);
        self.income.validate_into(&mut out);
        self.signals.validate_into(&self.income, &mut out);
        out
    }

    pub fn delta(&self) -> f64 {
        self.prefs.delta
    }

    fn check_contract(&self, z: &FlowContract) -> Result<(), ModelError> {
        if z.z.len() != self.income.len() {
            return Err(ModelError::Dimension {
                expected: self.income.len(),
                got: z.z.len(),
            });
        }
        if let Some(c) = z.z.iter().find(|c| !(**c >= 0.0)) {
            return Err(ModelError::NegativeConsumption(*c));
        }
        Ok(())
    }

    /// Expected utility of a flow contract for type `t`.
    pub fn flow_utility(&self, z: &FlowContract, t: Type) -> Result<f64, ModelError> {
        self.check_contract(z)?;
        Ok(self
            .income
            .probs(t)
            .iter()
            .zip(&z.z)
            .map(|(p, c)| p * self.prefs.u(*c))
            .sum())
    }

    /// Expected income minus expected consumption for type `t`.
    pub fn flow_profit(&self, z: &FlowContract, t: Type) -> Result<f64, ModelError> {
        self.check_contract(z)?;
        Ok(self
            .income
            .probs(t)
            .iter()
            .zip(z.z.iter().zip(&self.income.levels))
            .map(|(p, (c, y))| p * (y - c))
            .sum())
    }

    pub fn likelihood_ratio(&self, y: f64) -> Result<f64, ModelError> {
        Ok(self.income.likelihood[self.income.index_of(y)?])
    }

    pub fn signal_likelihood(&self, phi: usize) -> Result<f64, ModelError> {
        self.signals
            .likelihood
            .get(phi)
            .copied()
            .ok_or(ModelError::UnknownSignal(phi))
    }

    /// `sum_{tau=t}^{T} delta^(tau - t)`.
    pub fn annuity(&self, t: usize, horizon: usize) -> f64 {
        annuity(self.delta(), t, horizon)
    }

    /// Constant consumption delivering discounted utility `v` over periods `t..=T`.
    pub fn full_insurance_consumption(
        &self,
        v: f64,
        t: usize,
        horizon: usize,
    ) -> Result<f64, ModelError> {
        let x = v / self.annuity(t, horizon);
        let floor = self.prefs.utility_floor();
        if x < floor {
            return Err(ModelError::OutOfRange {
                value: x,
                detail: format!("below the utility floor {floor}"),
            });
        }
        if let Some(sup) = self.prefs.utility_sup() {
            if x >= sup {
                return Err(ModelError::OutOfRange {
                    value: x,
                    detail: format!("at or above the utility supremum {sup}"),
                });
            }
        }
        Ok(self.prefs.psi(x))
    }

    /// Type distribution in periods `1..=T` given the initial type.
    pub fn type_path(&self, theta1: Type, horizon: usize) -> Vec<[f64; 2]> {
        let mut d = [0.0; 2];
        d[theta1.index()] = 1.0;
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            out.push(d);
            let mut n = [0.0; 2];
            for i in 0..2 {
                for j in 0..2 {
                    n[j] += d[i] * self.types.transition[i][j];
                }
            }
            d = n;
        }
        out
    }

    fn discounted_sum(&self, theta1: Type, horizon: usize, per_type: [f64; 2]) -> f64 {
        self.type_path(theta1, horizon)
            .iter()
            .enumerate()
            .map(|(t, d)| self.delta().powi(t as i32) * (d[0] * per_type[0] + d[1] * per_type[1]))
            .sum()
    }

    /// Expected discounted utility without insurance.
    pub fn outside_option(&self, theta1: Type, horizon: usize) -> f64 {
        let v = Type::ALL.map(|t| {
            self.income
                .probs(t)
                .iter()
                .zip(&self.income.levels)
                .map(|(p, y)| p * self.prefs.u(*y))
                .sum::<f64>()
        });
        self.discounted_sum(theta1, horizon, v)
    }

    /// Expected discounted income given the initial type.
    pub fn expected_discounted_income(&self, theta1: Type, horizon: usize) -> f64 {
        self.discounted_sum(theta1, horizon, Type::ALL.map(|t| self.income.mean(t)))
    }

    /// Actuarially fair full insurance: `(V^FI, c^FI)`.
    pub fn full_info_utility(&self, theta1: Type, horizon: usize) -> (f64, f64) {
        let a = self.annuity(1, horizon);
        let c = self.expected_discounted_income(theta1, horizon) / a;
        (self.prefs.u(c) * a, c)
    }
}

pub fn annuity(delta: f64, t: usize, horizon: usize) -> f64 {
    if t > horizon {
        return 0.0;
    }
    (0..=(horizon - t)).map(|k| delta.powi(k as i32)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fixture_is_valid() {
        assert!(ModelPrimitives::fixture().validate().is_empty());
    }

    #[test]
    fn equal_distributions_violate_mean_ordering() {
        let mut m = ModelPrimitives::fixture();
        m.income = IncomeModel::new(vec![1.0, 4.0], vec![0.1, 0.9], vec![0.1, 0.9]);
        let v = m.validate();
        assert!(v
            .iter()
            .any(|x| x.invariant == "income first-moment ordering"));
    }

    #[test]
    fn non_strict_persistence_is_rejected() {
        let mut m = ModelPrimitives::fixture();
        m.types = TypeProcess::new(0.5, 0.7, 0.5);
        m.types.transition[0] = [0.5, 0.5];
        let v = m.validate();
        assert!(v.iter().any(|x| x.invariant == "persistence"));
    }

    #[test]
    fn flow_utility_examples() {
        let m = ModelPrimitives::fixture();
        let z = FlowContract::new(vec![0.16, 1.137778]);
        assert_abs_diff_eq!(m.flow_utility(&z, Type::High).unwrap(), 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m.flow_utility(&z, Type::Low).unwrap(), 1.6, epsilon = 1e-6);
        let c = FlowContract::constant(4.0, 2);
        assert_eq!(m.flow_utility(&c, Type::Low).unwrap(), 4.0);
        assert_eq!(m.flow_utility(&c, Type::High).unwrap(), 4.0);
        let bad = FlowContract::new(vec![-1.0, 1.0]);
        assert!(matches!(
            m.flow_utility(&bad, Type::High),
            Err(ModelError::NegativeConsumption(_))
        ));
    }

    #[test]
    fn flow_profit_examples() {
        let m = ModelPrimitives::fixture();
        let zero = FlowContract::constant(0.0, 2);
        assert_abs_diff_eq!(
            m.flow_profit(&zero, Type::High).unwrap(),
            3.7,
            epsilon = 1e-12
        );
        let pass = FlowContract::new(vec![1.0, 4.0]);
        assert_abs_diff_eq!(
            m.flow_profit(&pass, Type::Low).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        let z = FlowContract::new(vec![0.16, 1.137778]);
        assert_abs_diff_eq!(m.flow_profit(&z, Type::High).unwrap(), 2.66, epsilon = 1e-6);
    }

    #[test]
    fn likelihood_examples() {
        let m = ModelPrimitives::fixture();
        assert_abs_diff_eq!(m.likelihood_ratio(4.0).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.likelihood_ratio(1.0).unwrap(), 4.0, epsilon = 1e-15);
        assert!(m.likelihood_ratio(2.0).is_err());
        let ri = m.with_realization_independent();
        assert_abs_diff_eq!(ri.signal_likelihood(0).unwrap(), 1.0, epsilon = 1e-15);
        assert!(ri.signal_likelihood(1).is_err());
        for y in 0..2 {
            assert_eq!(
                m.signals.likelihood[m.signals.map[y]],
                m.income.likelihood[y]
            );
        }
    }

    #[test]
    fn full_insurance_consumption_examples() {
        let m = ModelPrimitives::fixture();
        assert_abs_diff_eq!(
            m.full_insurance_consumption(4.0, 1, 1).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            m.full_insurance_consumption(7.6, 1, 2).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        assert_eq!(m.full_insurance_consumption(0.0, 1, 2).unwrap(), 0.0);
        assert!(m.full_insurance_consumption(-0.1, 1, 2).is_err());
    }

    #[test]
    fn outside_option_examples() {
        let m = ModelPrimitives::fixture();
        assert_abs_diff_eq!(m.outside_option(Type::High, 1), 3.8, epsilon = 1e-12);
        assert_abs_diff_eq!(m.outside_option(Type::High, 2), 7.112, epsilon = 1e-12);
        assert_abs_diff_eq!(m.outside_option(Type::Low, 2), 6.242, epsilon = 1e-12);
    }

    #[test]
    fn full_info_examples() {
        let m = ModelPrimitives::fixture();
        let (v, c) = m.full_info_utility(Type::High, 1);
        assert_abs_diff_eq!(c, 3.7, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 2.0 * 3.7f64.sqrt(), epsilon = 1e-12);
        let (_, c2) = m.full_info_utility(Type::High, 2);
        assert_abs_diff_eq!(
            c2,
            (3.7 + 0.9 * (0.8 * 3.7 + 0.2 * 2.8)) / 1.9,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(c2, 3.614737, epsilon = 1e-6);
        let mut d = m.clone();
        d.income = IncomeModel::new(vec![2.5], vec![1.0], vec![1.0]);
        d.signals = SignalStructure::fully_contingent(&d.income);
        assert_abs_diff_eq!(d.full_info_utility(Type::Low, 3).1, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn certificates() {
        let p = |rho| Preferences::crra(rho, CrraNormalization::Standard, 0.9);
        assert_eq!(
            p(0.5).supermodularity_certificate(0.5, 5.0, 50),
            Psi3Sign::ZeroPsi3
        );
        assert_eq!(
            p(0.8).supermodularity_certificate(0.5, 5.0, 50),
            Psi3Sign::PositivePsi3
        );
        assert_eq!(
            p(0.4).supermodularity_certificate(0.5, 5.0, 50),
            Psi3Sign::NegativePsi3
        );
        assert_eq!(
            p(2.0).supermodularity_certificate(-3.0, 0.5, 50),
            Psi3Sign::PositivePsi3
        );
        let c = Preferences::cara(0.7, 0.9);
        assert_eq!(
            c.supermodularity_certificate(0.0, 1.0, 50),
            Psi3Sign::PositivePsi3
        );
    }

    #[test]
    fn derivative_consistency() {
        let prefs = [
            Preferences::crra(0.5, CrraNormalization::Power, 0.9),
            Preferences::crra(0.8, CrraNormalization::Standard, 0.9),
            Preferences::crra(2.0, CrraNormalization::Standard, 0.9),
            Preferences::cara(0.6, 0.9),
        ];
        let h = 1e-5;
        for p in &prefs {
            for c in [0.3, 1.0, 2.7] {
                let x = p.u(c);
                assert_abs_diff_eq!(p.psi(x), c, epsilon = 1e-12 * c.max(1.0));
                assert_abs_diff_eq!(p.psi_prime(x), 1.0 / p.u_prime(c), epsilon = 1e-10);
                let fd2 = (p.psi_prime(x + h) - p.psi_prime(x - h)) / (2.0 * h);
                assert_abs_diff_eq!(p.psi_second(x), fd2, epsilon = 1e-6 * fd2.abs().max(1.0));
                let fd3 = (p.psi_second(x + h) - p.psi_second(x - h)) / (2.0 * h);
                assert_abs_diff_eq!(p.psi_third(x), fd3, epsilon = 1e-5 * fd3.abs().max(1.0));
                assert_abs_diff_eq!(p.psi_prime_inv(p.psi_prime(x)), x, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn fixture_normalization_is_two_sqrt() {
        let m = ModelPrimitives::fixture();
        assert_eq!(m.prefs.u(4.0), 4.0);
        assert_eq!(m.prefs.u0(), Some(0.0));
        assert_abs_diff_eq!(m.prefs.psi(2.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.income.l2(), 2.0, epsilon = 1e-15);
    }
}
