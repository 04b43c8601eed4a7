//! Randomized invariants over the model, constraint, and LP layers.

use proptest::prelude::*;

use sicmdp::bench::{generate_sewage_env, SewageSpec};
use sicmdp::constraint::ConstraintFamily;
use sicmdp::lp::{self, LinearProgram, LpStatus, Row};
use sicmdp::model::{occupancy_to_policy, policy_to_occupancy, Policy};

fn arb_policy(ns: usize, na: usize) -> impl Strategy<Value = Policy> {
    proptest::collection::vec(0.01f64..1.0, ns * na).prop_map(move |raw| {
        let mut probs = vec![vec![0.0; na]; ns];
        for s in 0..ns {
            let total: f64 = raw[s * na..(s + 1) * na].iter().sum();
            for a in 0..na {
                probs[s][a] = raw[s * na + a] / total;
            }
        }
        Policy::new(probs).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Occupancy measures from any policy satisfy the discounted flow
    /// balance at every state and sum to one.
    #[test]
    fn occupancy_flow_balance(seed in 0u64..50, policy in arb_policy(8, 4)) {
        let model = generate_sewage_env(&SewageSpec::standard(seed)).unwrap();
        let nu = policy_to_occupancy(&model, &policy).unwrap();
        let (ns, na) = (model.num_states, model.num_actions);
        let total: f64 = (0..ns).flat_map(|s| (0..na).map(move |a| (s, a)))
            .map(|(s, a)| nu.at(s, a)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for s2 in 0..ns {
            let out: f64 = (0..na).map(|a| nu.at(s2, a)).sum();
            let mut inflow = (1.0 - model.gamma) * model.mu[s2];
            for s in 0..ns {
                for a in 0..na {
                    inflow += model.gamma * nu.at(s, a) * model.p(s, a, s2);
                }
            }
            prop_assert!((out - inflow).abs() < 1e-9, "state {s2}: {out} vs {inflow}");
        }
    }

    /// Policy -> occupancy -> policy is the identity wherever the state
    /// marginal is positive.
    #[test]
    fn occupancy_roundtrip(seed in 0u64..50, policy in arb_policy(8, 4)) {
        let model = generate_sewage_env(&SewageSpec::standard(seed)).unwrap();
        let nu = policy_to_occupancy(&model, &policy).unwrap();
        let back = occupancy_to_policy(&nu);
        for s in 0..model.num_states {
            let marginal: f64 = (0..model.num_actions).map(|a| nu.at(s, a)).sum();
            if marginal > 1e-12 {
                for a in 0..model.num_actions {
                    prop_assert!((back.prob(s, a) - policy.prob(s, a)).abs() < 1e-8);
                }
            }
        }
    }

    /// Clamping onto the constraint box is idempotent and lands inside.
    #[test]
    fn clamp_idempotent(seed in 0u64..20, y0 in -3.0f64..4.0, y1 in -3.0f64..4.0) {
        let model = generate_sewage_env(&SewageSpec::standard(seed)).unwrap();
        let family: ConstraintFamily = model.family().unwrap();
        let mut y = [y0, y1];
        family.clamp(&mut y);
        prop_assert!(family.contains(&y));
        let once = y;
        family.clamp(&mut y);
        prop_assert_eq!(y, once);
    }

    /// Appending a feasible-at-zero cut never increases the optimum, and
    /// warm restarts agree with cold solves.
    #[test]
    fn cuts_monotone_and_warm_consistent(
        obj in proptest::collection::vec(0.0f64..1.0, 5),
        rows in proptest::collection::vec(
            (proptest::collection::vec(0.0f64..1.0, 5), 0.5f64..4.0), 3..6),
        cuts in proptest::collection::vec(
            (proptest::collection::vec(0.0f64..1.0, 5), 0.5f64..4.0), 1..6),
    ) {
        let mut lp = LinearProgram::new(
            obj,
            rows.into_iter().map(|(c, b)| Row::le(c, b)).collect(),
        );
        for b in lp.bounds.iter_mut() {
            b.1 = 5.0;
        }
        let mut sol = lp::solve(&lp).unwrap();
        prop_assert_eq!(sol.status, LpStatus::Optimal);
        let mut prev = sol.objective_value;
        for (coeffs, rhs) in cuts {
            let cut = Row::le(coeffs, rhs);
            let warm = lp::resolve_with_row(&lp, &sol, &cut).unwrap();
            lp.rows.push(cut);
            let cold = lp::solve(&lp).unwrap();
            prop_assert_eq!(warm.status, LpStatus::Optimal);
            let scale = 1.0 + cold.objective_value.abs();
            prop_assert!((warm.objective_value - cold.objective_value).abs() <= 1e-7 * scale);
            prop_assert!(warm.objective_value <= prev + 1e-9);
            prev = warm.objective_value;
            sol = warm;
        }
    }

    /// Optimal primal solutions satisfy every row within tolerance.
    #[test]
    fn lp_solutions_are_feasible(
        obj in proptest::collection::vec(0.0f64..1.0, 4),
        rows in proptest::collection::vec(
            (proptest::collection::vec(-0.5f64..1.0, 4), -0.5f64..3.0), 2..7),
    ) {
        let mut lp = LinearProgram::new(
            obj,
            rows.into_iter().map(|(c, b)| Row::le(c, b)).collect(),
        );
        for b in lp.bounds.iter_mut() {
            b.1 = 5.0;
        }
        let sol = lp::solve(&lp).unwrap();
        if sol.status == LpStatus::Optimal {
            for row in &lp.rows {
                let lhs: f64 = row.coeffs.iter().zip(&sol.x).map(|(a, x)| a * x).sum();
                prop_assert!(lhs <= row.rhs + 1e-7, "{lhs} > {}", row.rhs);
            }
            for (x, &(lo, hi)) in sol.x.iter().zip(&lp.bounds) {
                prop_assert!(*x >= lo - 1e-9 && *x <= hi + 1e-9);
            }
        }
    }
}
