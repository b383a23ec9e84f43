//! Incentive oracle by literal enumeration of pure reporting strategies.
//!
//! A strategy maps every private history `(theta_1, y_1, theta_2, ..., theta_t)` to a
//! report. All such maps are enumerated jointly and each is evaluated by summing over
//! type and income paths; nothing is decomposed by backward induction.

use dyncontract::mechanism::Mechanism;
use dyncontract::model::{ModelPrimitives, Type};

struct Term {
    weight: f64,
    /// Flow utility for every report history of length `t`.
    utility: Vec<f64>,
    /// Strategy bit deciding the report in each period up to `t`.
    bits: Vec<usize>,
}

fn terms(model: &ModelPrimitives, m: &Mechanism, theta1: Type) -> (Vec<Term>, usize) {
    let horizon = m.horizon;
    let n = model.income.len();
    let branching = 2 * n;
    let offsets: Vec<usize> = (0..horizon)
        .map(|t| (0..t).map(|k| branching.pow(k as u32)).sum())
        .collect();
    let nbits = (0..horizon).map(|k| branching.pow(k as u32)).sum();
    let mut out = Vec::new();
    // (probability, current type, state index, signal rank, bits so far)
    let mut frontier = vec![(1.0, theta1, 0usize, 0usize, Vec::<usize>::new())];
    let delta = model.delta();
    for t in 1..=horizon {
        let mut next = Vec::new();
        for (p, th, k, s, bits) in &frontier {
            let mut bits = bits.clone();
            bits.push(offsets[t - 1] + k);
            let probs = model.income.probs(*th);
            for y in 0..n {
                out.push(Term {
                    weight: p * probs[y] * delta.powi(t as i32 - 1),
                    utility: (0..1usize << t)
                        .map(|r| model.prefs.u(m.z(t, *s, r)[y]))
                        .collect(),
                    bits: bits.clone(),
                });
                if t < horizon {
                    for nt in Type::ALL {
                        next.push((
                            p * probs[y] * model.types.pi(*th, nt),
                            nt,
                            k * branching + y * 2 + nt.index(),
                            s * model.signals.count + model.signals.map[y],
                            bits.clone(),
                        ));
                    }
                }
            }
        }
        frontier = next;
    }
    (out, nbits)
}

fn truthful_bits(model: &ModelPrimitives, horizon: usize, theta1: Type) -> u64 {
    let n = model.income.len();
    let branching = 2 * n;
    let mut mask = 0u64;
    let mut offset = 0;
    for t in 1..=horizon {
        let count = branching.pow(t as u32 - 1);
        for k in 0..count {
            let current = if t == 1 { theta1.index() } else { k % 2 };
            if current == 1 {
                mask |= 1 << (offset + k);
            }
        }
        offset += count;
    }
    mask
}

fn value(terms: &[Term], mask: u64) -> f64 {
    terms
        .iter()
        .map(|term| {
            let r = term
                .bits
                .iter()
                .fold(0, |a, b| 2 * a + ((mask >> b) & 1) as usize);
            term.weight * term.utility[r]
        })
        .sum()
}

/// Largest gain of any pure reporting strategy over truth-telling, across both initial types.
pub fn max_gain_by_enumeration(model: &ModelPrimitives, m: &Mechanism) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for theta1 in Type::ALL {
        let (terms, nbits) = terms(model, m, theta1);
        assert!(
            nbits <= 24,
            "{nbits} strategy bits is too many to enumerate"
        );
        let truthful = value(&terms, truthful_bits(model, m.horizon, theta1));
        let best = (0..1u64 << nbits)
            .map(|mask| value(&terms, mask))
            .fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(best - truthful);
    }
    worst
}

/// Truthful expected discounted utility by path enumeration.
pub fn truthful_value(model: &ModelPrimitives, m: &Mechanism, theta1: Type) -> f64 {
    let (terms, _) = terms(model, m, theta1);
    value(&terms, truthful_bits(model, m.horizon, theta1))
}
