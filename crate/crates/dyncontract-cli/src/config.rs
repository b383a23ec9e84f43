//! Scenario files: TOML with strict key checking.

use std::path::{Path, PathBuf};

use dyncontract::mechanism::DEFAULT_IC_BUDGET;
use dyncontract::model::{
    CrraNormalization, IncomeModel, ModelPrimitives, Preferences, SignalStructure, Type,
    TypeProcess,
};
use dyncontract::solver::{RelaxedProblemSpec, SolverConfig};
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub horizon: usize,
    pub out: Option<PathBuf>,
    pub preferences: PreferencesBlock,
    pub types: TypesBlock,
    pub income: IncomeBlock,
    #[serde(default)]
    pub signals: SignalsBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub solve: SolveBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
    #[serde(default)]
    pub equilibrium: EquilibriumBlock,
    pub sweep: Option<SweepBlock>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Crra,
    Cara,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Power,
    Standard,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencesBlock {
    pub family: Family,
    pub rho: Option<f64>,
    #[serde(default)]
    pub normalization: Normalization,
    pub alpha: Option<f64>,
    pub delta: f64,
    pub eps_c: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypesBlock {
    pub pi_hh: f64,
    pub pi_ll: f64,
    pub mu_l: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncomeBlock {
    pub levels: Vec<f64>,
    pub p_l: Vec<f64>,
    pub p_h: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    #[default]
    FullyContingent,
    RealizationIndependent,
    Custom,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalsBlock {
    #[serde(default)]
    pub mode: SignalMode,
    pub map: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    /// Pass/fail tolerance of the verification checks.
    pub tol: f64,
    /// Stopping tolerance of the interior point method.
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub ic_budget: u64,
    pub structure: bool,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let s = SolverConfig::default();
        SolverBlock {
            tol: 1e-7,
            kkt_tol: s.tol,
            max_iter: s.max_iter,
            ic_budget: DEFAULT_IC_BUDGET,
            structure: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveBlock {
    /// Defaults to the full-information utility of the low type.
    pub v_low: Option<f64>,
    pub v_high: Option<f64>,
    /// `V_h = V_l^FI + w (V_h^FI - V_l^FI)` when `v_high` is absent.
    pub high_weight: f64,
    pub ic: bool,
}

impl Default for SolveBlock {
    fn default() -> Self {
        SolveBlock {
            v_low: None,
            v_high: None,
            high_weight: 0.5,
            ic: true,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    pub mechanism: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumBlock {
    pub commitment: bool,
    pub ic: bool,
    pub mu_sweep: Vec<f64>,
}

impl Default for EquilibriumBlock {
    fn default() -> Self {
        EquilibriumBlock {
            commitment: false,
            ic: true,
            mu_sweep: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    VHigh,
    MuLow,
    Rho,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::VHigh => "v_high",
            SweepParameter::MuLow => "mu_low",
            SweepParameter::Rho => "rho",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        if cfg.horizon == 0 {
            return Err(ConfigError("horizon must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let cfg =
            Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        Ok((cfg, text))
    }

    pub fn preferences(&self) -> Result<Preferences, ConfigError> {
        let p = &self.preferences;
        let mut prefs = match p.family {
            Family::Crra => {
                if p.alpha.is_some() {
                    return Err(ConfigError(
                        "preferences.alpha is not used by family = \"crra\"".into(),
                    ));
                }
                let rho = p.rho.ok_or_else(|| {
                    ConfigError("missing key preferences.rho for family = \"crra\"".into())
                })?;
                let n = match p.normalization {
                    Normalization::Power => CrraNormalization::Power,
                    Normalization::Standard => CrraNormalization::Standard,
                };
                Preferences::crra(rho, n, p.delta)
            }
            Family::Cara => {
                if p.rho.is_some() {
                    return Err(ConfigError(
                        "preferences.rho is not used by family = \"cara\"".into(),
                    ));
                }
                let alpha = p.alpha.ok_or_else(|| {
                    ConfigError("missing key preferences.alpha for family = \"cara\"".into())
                })?;
                Preferences::cara(alpha, p.delta)
            }
        };
        if let Some(e) = p.eps_c {
            prefs.eps_c = e;
        }
        Ok(prefs)
    }

    pub fn model(&self) -> Result<ModelPrimitives, ConfigError> {
        let prefs = self.preferences()?;
        let t = &self.types;
        let income = IncomeModel::new(
            self.income.levels.clone(),
            self.income.p_l.clone(),
            self.income.p_h.clone(),
        );
        let signals = match (self.signals.mode, &self.signals.map) {
            (SignalMode::FullyContingent, None) => SignalStructure::fully_contingent(&income),
            (SignalMode::RealizationIndependent, None) => {
                SignalStructure::realization_independent(&income)
            }
            (SignalMode::Custom, Some(map)) => {
                if map.len() != income.len() {
                    return Err(ConfigError(format!(
                        "signals.map has {} entries, income.levels has {}",
                        map.len(),
                        income.len()
                    )));
                }
                SignalStructure::from_map(map.clone(), &income)
            }
            (SignalMode::Custom, None) => {
                return Err(ConfigError(
                    "missing key signals.map for mode = \"custom\"".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(ConfigError("signals.map requires mode = \"custom\"".into()))
            }
        };
        let types = TypeProcess::new(t.pi_hh, t.pi_ll, t.mu_l);
        ModelPrimitives::validated(prefs, types, income, signals)
            .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tol: self.solver.kkt_tol,
            max_iter: self.solver.max_iter,
            ..SolverConfig::default()
        }
    }

    /// Target utilities of the `solve` command for a given model.
    pub fn targets(&self, model: &ModelPrimitives) -> (f64, f64) {
        let fl = model.full_info_utility(Type::Low, self.horizon).0;
        let fh = model.full_info_utility(Type::High, self.horizon).0;
        let vl = self.solve.v_low.unwrap_or(fl);
        let vh = self
            .solve
            .v_high
            .unwrap_or(fl + self.solve.high_weight * (fh - fl));
        (vl, vh)
    }

    pub fn problem(&self, model: &ModelPrimitives, v_low: f64, v_high: f64) -> RelaxedProblemSpec {
        RelaxedProblemSpec::new(model.clone(), self.horizon, v_low, v_high)
            .with_structure(self.solver.structure)
    }
}
