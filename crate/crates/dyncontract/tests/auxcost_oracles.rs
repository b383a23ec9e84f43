use dyncontract::auxcost::{chi_quadratic_oracle, AuxCost, AuxTarget, DEFAULT_TOL};
use dyncontract::model::{
    CrraNormalization, IncomeModel, ModelPrimitives, Preferences, SignalStructure, TypeProcess,
};
use proptest::prelude::*;

fn with_prefs(prefs: Preferences) -> ModelPrimitives {
    let mut m = ModelPrimitives::fixture();
    m.prefs = prefs;
    m
}

fn crra(rho: f64) -> ModelPrimitives {
    with_prefs(Preferences::crra(rho, CrraNormalization::Power, 0.9))
}

fn three_levels(prefs: Preferences) -> ModelPrimitives {
    let income = IncomeModel::new(
        vec![1.0, 2.5, 4.0],
        vec![0.3, 0.4, 0.3],
        vec![0.1, 0.3, 0.6],
    );
    let signals = SignalStructure::fully_contingent(&income);
    ModelPrimitives::validated(prefs, TypeProcess::new(0.8, 0.7, 0.5), income, signals).unwrap()
}

fn families() -> Vec<ModelPrimitives> {
    vec![
        crra(0.5),
        crra(0.8),
        crra(2.0),
        with_prefs(Preferences::cara(0.7, 0.9)),
        three_levels(Preferences::crra(0.5, CrraNormalization::Power, 0.9)),
        three_levels(Preferences::crra(0.8, CrraNormalization::Power, 0.9)),
    ]
}

/// Interior targets around consumption level `c`.
fn targets(m: &ModelPrimitives) -> Vec<AuxTarget> {
    let aux = AuxCost::new(m);
    let mut out = Vec::new();
    for c in [1.6, 2.2, 2.8, 3.4] {
        let nu = m.prefs.u(c);
        let scale = m.prefs.u(c) - m.prefs.u(0.8 * c);
        for k in [0.05, 0.3, 0.7] {
            let t = AuxTarget::new(nu, k * scale);
            if aux.interior_membership(t) {
                out.push(t);
            }
        }
    }
    assert!(out.len() >= 6);
    out
}

#[test]
fn closed_form_on_fixture() {
    let m = crra(0.5);
    let aux = AuxCost::new(&m);
    for i in 0..10 {
        for j in 0..10 {
            let nu = 2.0 + 0.25 * i as f64;
            let delta = 0.05 + 0.055 * j as f64;
            let t = AuxTarget::new(nu, delta);
            assert!(aux.interior_membership(t));
            let chi = aux.chi(t).unwrap();
            // Fixture: sum p_l^2 / p_h = 2, so the wedge enters with weight 1/4.
            let direct = nu * nu / 4.0 + delta * delta / 4.0;
            let (oracle, grad) = chi_quadratic_oracle(&m, t).unwrap();
            assert!((chi - direct).abs() <= 1e-9);
            assert!((oracle - direct).abs() <= 1e-12);
            let g = aux.chi_gradient(t).unwrap();
            assert!((g.0 - grad.0).abs() <= 1e-9 && (g.1 - grad.1).abs() <= 1e-9);
        }
    }
}

#[test]
fn two_levels_match_pinned_profile() {
    for m in [crra(0.5), crra(0.8), crra(2.0)] {
        let aux = AuxCost::new(&m);
        for t in targets(&m) {
            let x = aux.pinned_binary(t).unwrap();
            let direct: f64 = m
                .income
                .p_h
                .iter()
                .zip(x)
                .map(|(p, x)| p * m.prefs.psi(x))
                .sum();
            let chi = aux.chi(t).unwrap();
            assert!(
                (chi - direct).abs() <= 1e-9 * (1.0 + direct.abs()),
                "{chi} vs {direct}"
            );
        }
    }
}

#[test]
fn three_levels_grid_search_brackets_cost() {
    let m = three_levels(Preferences::crra(0.5, CrraNormalization::Power, 0.9));
    let aux = AuxCost::new(&m);
    for t in targets(&m) {
        let chi = aux.chi(t).unwrap();
        let grid = aux.brute_force_chi(t, 2e-3).unwrap();
        assert!(grid >= chi - 1e-10, "grid {grid} below optimum {chi}");
        assert!(grid - chi <= 1e-3, "grid {grid} vs {chi}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    for m in families() {
        let aux = AuxCost::new(&m);
        for t in targets(&m) {
            let g = aux.chi_gradient(t).unwrap();
            let h = 1e-5;
            let f = |nu: f64, d: f64| aux.chi(AuxTarget::new(nu, d)).unwrap();
            let fd_nu = (f(t.nu + h, t.delta) - f(t.nu - h, t.delta)) / (2.0 * h);
            let fd_d = (f(t.nu, t.delta + h) - f(t.nu, t.delta - h)) / (2.0 * h);
            assert!(
                (g.0 - fd_nu).abs() <= 1e-5 * g.0.abs().max(1e-3),
                "{g:?} vs {fd_nu}"
            );
            assert!(
                (g.1 - fd_d).abs() <= 1e-5 * g.1.abs().max(1e-3),
                "{g:?} vs {fd_d}"
            );
        }
    }
}

#[test]
fn first_order_conditions_hold_per_income() {
    for m in families() {
        let aux = AuxCost::new(&m);
        for t in targets(&m) {
            let s = aux.solve(t, DEFAULT_TOL).unwrap();
            assert!(s.interior);
            for y in 0..m.income.len() {
                let l = m.income.likelihood[y];
                let r = m.prefs.psi_prime(s.x[y]) - s.grad.0 - s.grad.1 * (1.0 - l);
                assert!(r.abs() <= 1e-8 * (1.0 + s.grad.0.abs()), "y = {y}: {r}");
            }
        }
    }
}

#[test]
fn cross_derivative_signs() {
    let at = |rho: f64| {
        let m = crra(rho);
        let aux = AuxCost::new(&m);
        [1.6, 2.0, 2.4, 2.8, 3.2]
            .iter()
            .map(|&c| aux.chi_cross(AuxTarget::new(m.prefs.u(c), 0.3)).unwrap())
            .collect::<Vec<_>>()
    };
    assert!(at(0.5).iter().all(|x| x.abs() <= 1e-9));
    assert!(at(0.8).iter().all(|x| *x > 0.0));
    assert!(at(0.4).iter().all(|x| *x < 0.0));
}

#[test]
fn cross_derivative_matches_differenced_gradient() {
    for m in [crra(0.8), crra(0.4), crra(2.0)] {
        let aux = AuxCost::new(&m);
        for t in targets(&m) {
            let h = 1e-5;
            let g = |d: f64| aux.chi_gradient(AuxTarget::new(t.nu, d)).unwrap().0;
            let fd = (g(t.delta + h) - g(t.delta - h)) / (2.0 * h);
            let x = aux.chi_cross(t).unwrap();
            assert!((x - fd).abs() <= 1e-5 * x.abs().max(1e-3), "{x} vs {fd}");
        }
    }
}

fn family(k: usize) -> ModelPrimitives {
    families().swap_remove(k)
}

fn interior(m: &ModelPrimitives, c: f64, k: f64) -> Option<AuxTarget> {
    let nu = m.prefs.u(c);
    let t = AuxTarget::new(nu, k * (nu - m.prefs.u(0.7 * c)));
    AuxCost::new(m).interior_membership(t).then_some(t)
}

#[test]
fn sampled_targets_are_mostly_interior() {
    for k in 0..6 {
        let m = family(k);
        let mut hits = 0;
        for i in 0..20 {
            for j in 0..8 {
                hits += interior(&m, 1.2 + 0.115 * i as f64, 0.1 * j as f64).is_some() as usize;
            }
        }
        assert!(hits >= 120, "family {k}: {hits} of 160");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cost_is_strictly_convex(
        k in 0usize..6,
        c1 in 1.2f64..3.5, w1 in 0.0f64..0.8,
        c2 in 1.2f64..3.5, w2 in 0.0f64..0.8,
    ) {
        let m = family(k);
        let (Some(a), Some(b)) = (interior(&m, c1, w1), interior(&m, c2, w2)) else { return Ok(()) };
        prop_assume!((a.nu - b.nu).abs() + (a.delta - b.delta).abs() > 1e-3);
        let aux = AuxCost::new(&m);
        let mid = AuxTarget::new(0.5 * (a.nu + b.nu), 0.5 * (a.delta + b.delta));
        let gap = 0.5 * (aux.chi(a).unwrap() + aux.chi(b).unwrap()) - aux.chi(mid).unwrap();
        prop_assert!(gap > 0.0, "midpoint gap {gap}");
    }

    #[test]
    fn cost_increases_in_both_coordinates(k in 0usize..6, c in 1.2f64..3.5, w in 0.0f64..0.8) {
        let m = family(k);
        let Some(t) = interior(&m, c, w) else { return Ok(()) };
        let aux = AuxCost::new(&m);
        let g = aux.chi_gradient(t).unwrap();
        prop_assert!(g.0 > 0.0);
        prop_assert!(g.1 >= 0.0);
        if t.delta > 1e-6 {
            prop_assert!(g.1 > 0.0);
        }
    }

    #[test]
    fn zero_wedge_costs_full_insurance(k in 0usize..6, c in 0.5f64..4.0) {
        let m = family(k);
        let nu = m.prefs.u(c);
        let chi = AuxCost::new(&m).chi(AuxTarget::new(nu, 0.0)).unwrap();
        prop_assert!((chi - c).abs() <= 1e-9 * c.max(1.0));
    }

    #[test]
    fn wedge_gradient_carries_inverse_marginal_utility_variance(
        k in 0usize..6, c in 1.2f64..3.5, w in 0.0f64..0.8,
    ) {
        let m = family(k);
        let Some(t) = interior(&m, c, w) else { return Ok(()) };
        let s = AuxCost::new(&m).solve(t, DEFAULT_TOL).unwrap();
        let ph = &m.income.p_h;
        let l = &m.income.likelihood;
        let inv: Vec<f64> = s.zeta.z.iter().map(|c| 1.0 / m.prefs.u_prime(*c)).collect();
        let mean: f64 = ph.iter().zip(&inv).map(|(p, v)| p * v).sum();
        let var: f64 = ph.iter().zip(&inv).map(|(p, v)| p * (v - mean).powi(2)).sum();
        let spread: f64 = ph.iter().zip(l).map(|(p, l)| p * (1.0 - l).powi(2)).sum();
        prop_assert!((s.grad.1.powi(2) * spread - var).abs() <= 1e-8 * (1.0 + var));
    }

    /// With a positive cross derivative, ordered marginal costs order the targets.
    #[test]
    fn marginal_costs_single_cross(
        c1 in 1.2f64..3.5, w1 in 0.0f64..0.8,
        c2 in 1.2f64..3.5, w2 in 0.0f64..0.8,
    ) {
        let m = crra(0.8);
        let (Some(a), Some(b)) = (interior(&m, c1, w1), interior(&m, c2, w2)) else { return Ok(()) };
        let aux = AuxCost::new(&m);
        let (ga, gb) = (aux.chi_gradient(a).unwrap(), aux.chi_gradient(b).unwrap());
        if ga.0 >= gb.0 && ga.1 <= gb.1 {
            prop_assert!(a.nu >= b.nu - 1e-9 && a.delta <= b.delta + 1e-9);
        }
    }
}
