mod common;

use common::{fixture_fc, fixture_ri};
use dyncontract::market::{
    commitment_check, competitive_equilibrium, information_rent_check, monopoly_solution,
    MarketError,
};
use dyncontract::mechanism::{check_ic_exhaustive, DEFAULT_IC_BUDGET};
use dyncontract::model::{ModelPrimitives, Type, TypeProcess};
use dyncontract::solver::SolverConfig;

fn with_types(model: &ModelPrimitives, pi_hh: f64, pi_ll: f64, mu_l: f64) -> ModelPrimitives {
    let mut m = model.clone();
    m.types = TypeProcess::new(pi_hh, pi_ll, mu_l);
    m
}

#[test]
fn equilibrium_zeroes_both_profits() {
    let cfg = SolverConfig::default();
    for model in [fixture_fc(), fixture_ri()] {
        let eq = competitive_equilibrium(&model, 2, &cfg).unwrap();
        assert!(eq.profit.low.abs() <= 1e-7, "{:?}", eq.profit);
        assert!(eq.zero_profit_residual <= 1e-7);
        assert!((eq.v_star[0] - eq.v_fi[0]).abs() <= 1e-12);
        assert!(eq.v_star[1] > eq.v_star[0] && eq.v_star[1] < eq.v_fi[1]);
        let sol = eq.solution.as_ref().unwrap();
        assert!(sol.nodes[0].delta > 0.0);
        let ic = check_ic_exhaustive(&model, &eq.mechanism, DEFAULT_IC_BUDGET).unwrap();
        assert!(ic.max_violation <= 1e-8);
    }
}

#[test]
fn fixture_equilibrium_values() {
    let eq = competitive_equilibrium(&fixture_ri(), 2, &SolverConfig::default()).unwrap();
    assert!((eq.v_star[0] - 6.502215).abs() <= 1e-5, "{:?}", eq.v_star);
    assert!((eq.v_star[1] - 7.176184).abs() <= 1e-5, "{:?}", eq.v_star);
    assert!(eq.exists_pure());
}

#[test]
fn existence_margin_rises_with_the_low_share() {
    let cfg = SolverConfig::default();
    let mut flips = 0;
    let mut last: Option<f64> = None;
    for k in 1..10 {
        let model = with_types(&fixture_ri(), 0.8, 0.7, 0.1 * k as f64);
        let eq = competitive_equilibrium(&model, 2, &cfg).unwrap();
        let m = eq.existence_margin();
        if let Some(prev) = last {
            assert!(m > prev, "mu_l = {}: {m} after {prev}", 0.1 * k as f64);
            flips += (prev < 0.0 && m >= 0.0) as usize;
        }
        last = Some(m);
    }
    assert_eq!(flips, 1);
}

#[test]
fn commitment_rows_clear_the_reentry_offer() {
    let model = with_types(&fixture_ri(), 0.8, 1.0, 0.5);
    let eq = competitive_equilibrium(&model, 3, &SolverConfig::default()).unwrap();
    let r = commitment_check(&eq, &model).unwrap();
    assert!(!r.rows.is_empty());
    assert!(r.all_pass && r.min_slack >= 0.0, "{r:?}");
}

#[test]
fn commitment_requires_an_absorbing_low_state() {
    let model = fixture_ri();
    let eq = competitive_equilibrium(&model, 2, &SolverConfig::default()).unwrap();
    assert!(matches!(
        commitment_check(&eq, &model),
        Err(MarketError::Precondition(_))
    ));
}

#[test]
fn monopoly_holds_the_high_type_at_the_outside_option() {
    let cfg = SolverConfig::default();
    for mu in [0.1, 0.5, 0.9] {
        let model = with_types(&fixture_fc(), 0.8, 0.7, mu);
        let res = monopoly_solution(&model, 2, &cfg).unwrap();
        assert!((res.v_m[1] - res.outside[1]).abs() <= 1e-9);
        assert!(res.v_m[0] < res.outside[1]);
        assert!(res.rents_low >= -1e-9);
        let rent = information_rent_check(&model, 2, &cfg).unwrap();
        assert_eq!(rent.no_rents, res.corner, "mu_l = {mu}: {rent:?}");
    }
}

#[test]
fn outside_options_are_ordered_below_full_insurance() {
    for model in [fixture_fc(), fixture_ri()] {
        for horizon in 1..=4 {
            for th in Type::ALL {
                let (v, _) = model.full_info_utility(th, horizon);
                assert!(v > model.outside_option(th, horizon));
            }
            assert!(
                model.outside_option(Type::Low, horizon)
                    < model.outside_option(Type::High, horizon)
            );
        }
    }
}
