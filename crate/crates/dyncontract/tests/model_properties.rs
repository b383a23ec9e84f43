use dyncontract::model::{
    CrraNormalization, FlowContract, IncomeModel, ModelPrimitives, Preferences, SignalStructure,
    Type, TypeProcess,
};
use proptest::prelude::*;

fn model(
    rho: f64,
    lo: f64,
    gap: f64,
    q_h: f64,
    q_l: f64,
    pi_hh: f64,
    pi_ll: f64,
    mu: f64,
) -> Option<ModelPrimitives> {
    let income = IncomeModel::new(
        vec![lo, lo + gap],
        vec![q_l, 1.0 - q_l],
        vec![q_h, 1.0 - q_h],
    );
    let signals = SignalStructure::fully_contingent(&income);
    let prefs = Preferences::crra(rho, CrraNormalization::Power, 0.9);
    ModelPrimitives::validated(prefs, TypeProcess::new(pi_hh, pi_ll, mu), income, signals).ok()
}

prop_compose! {
    fn models()(
        rho in 0.2f64..3.0, lo in 0.5f64..2.0, gap in 0.5f64..4.0,
        q_h in 0.05f64..0.45, extra in 0.05f64..0.5,
        pi_hh in 0.5f64..0.95, pi_ll in 0.5f64..0.95, mu in 0.05f64..0.95,
    ) -> Option<ModelPrimitives> {
        model(rho, lo, gap, q_h, (q_h + extra).min(0.95), pi_hh, pi_ll, mu)
    }
}

#[test]
fn fixture_likelihood_ratio_falls_in_income() {
    let m = ModelPrimitives::fixture();
    assert!(m.likelihood_ratio(1.0).unwrap() > m.likelihood_ratio(4.0).unwrap());
    assert!((m.likelihood_ratio(1.0).unwrap() - 4.0).abs() <= 1e-15);
    assert!((m.likelihood_ratio(4.0).unwrap() - 2.0 / 3.0).abs() <= 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn constant_contracts_are_type_blind(m in models(), c in 0.1f64..8.0) {
        let Some(m) = m else { return Ok(()) };
        let z = FlowContract::constant(c, m.income.len());
        let a = m.flow_utility(&z, Type::Low).unwrap();
        let b = m.flow_utility(&z, Type::High).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn likelihood_wedge_has_zero_mean(m in models()) {
        let Some(m) = m else { return Ok(()) };
        let s: f64 = m.income.p_h.iter().zip(&m.income.likelihood).map(|(p, l)| p * (1.0 - l)).sum();
        prop_assert!(s.abs() <= 1e-12);
        prop_assert!(m.income.likelihood[0] > m.income.likelihood[1]);
    }

    #[test]
    fn full_insurance_beats_autarky_and_types_are_ordered(m in models(), horizon in 1usize..5) {
        let Some(m) = m else { return Ok(()) };
        for th in Type::ALL {
            prop_assert!(m.full_info_utility(th, horizon).0 > m.outside_option(th, horizon));
        }
        prop_assert!(m.outside_option(Type::Low, horizon) < m.outside_option(Type::High, horizon));
        prop_assert!(m.full_info_utility(Type::Low, horizon).0 < m.full_info_utility(Type::High, horizon).0);
    }
}

#[test]
fn generated_models_mostly_validate() {
    let mut ok = 0;
    for i in 0..10 {
        for j in 0..10 {
            let rho = 0.2 + 0.28 * i as f64;
            let q_h = 0.05 + 0.04 * j as f64;
            ok += model(
                rho,
                0.5 + 0.15 * j as f64,
                0.5 + 0.35 * i as f64,
                q_h,
                q_h + 0.2,
                0.8,
                0.7,
                0.5,
            )
            .is_some() as usize;
        }
    }
    assert!(ok >= 90, "{ok} of 100");
}
