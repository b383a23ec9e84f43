#![allow(dead_code)]

pub mod oracle;

use dyncontract::model::{ModelPrimitives, Type};
use dyncontract::solver::{solve_relaxed, RelaxedProblemSpec, RelaxedSolution, SolverConfig};

pub fn fixture_fc() -> ModelPrimitives {
    ModelPrimitives::fixture()
}

pub fn fixture_ri() -> ModelPrimitives {
    ModelPrimitives::fixture().with_realization_independent()
}

pub fn full_info(model: &ModelPrimitives, horizon: usize) -> (f64, f64) {
    (
        model.full_info_utility(Type::Low, horizon).0,
        model.full_info_utility(Type::High, horizon).0,
    )
}

/// `V = (V^FI_l, V^FI_l + w (V^FI_h - V^FI_l))`.
pub fn target(model: &ModelPrimitives, horizon: usize, w: f64) -> (f64, f64) {
    let (l, h) = full_info(model, horizon);
    (l, l + w * (h - l))
}

pub fn solve(model: &ModelPrimitives, horizon: usize, w: f64) -> RelaxedSolution {
    let (vl, vh) = target(model, horizon, w);
    solve_relaxed(
        &RelaxedProblemSpec::new(model.clone(), horizon, vl, vh),
        &SolverConfig::default(),
    )
    .unwrap()
}
