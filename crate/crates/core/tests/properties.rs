mod common;

use proptest::prelude::*;

use safechain::gridworld::simulate_ensemble;
use safechain::invariant::{certify_invariance, maximal_invariant_set, InvarianceVerdict, InvariantOptions};
use safechain::markov::MarkovChain;
use safechain::polytope::{contains_on_simplex, Containment};
use safechain::solver::DEFAULT_LP_TOL;
use safechain::synthesis::{synthesize, StepVerdict, SynthesisProblem};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn containment_verdicts_are_sound(seed in any::<u64>(), n in 3usize..7) {
        let mut rng = common::rng(seed);
        let chain = common::ergodic_chain(&mut rng, n);
        let v = chain.stationary().unwrap().v;
        let inner = common::safe_box(&mut rng, &v);
        let outer = common::safe_box(&mut rng, &v);
        let verdict = contains_on_simplex(&inner, &outer, DEFAULT_LP_TOL).unwrap();
        if let Containment::Contained(cert) = &verdict {
            prop_assert!(cert.simplex_violation(&inner, &outer) <= 1e-8);
        }
        for _ in 0..200 {
            let x = common::probe_point(&mut rng, &v);
            if inner.contains_point(&x, 0.0) && !outer.contains_point(&x, 1e-7) {
                prop_assert!(!verdict.holds(), "point of inner outside outer yet verdict {verdict:?}");
            }
        }
        // A set always contains its own intersection with another.
        let both = inner.intersect(&outer).unwrap();
        prop_assert!(contains_on_simplex(&both, &inner, DEFAULT_LP_TOL).unwrap().holds());
    }

    #[test]
    fn conical_form_matches_on_simplex(seed in any::<u64>(), n in 3usize..7) {
        let mut rng = common::rng(seed);
        let chain = common::ergodic_chain(&mut rng, n);
        let v = chain.stationary().unwrap().v;
        let p = common::safe_box(&mut rng, &v);
        let c = p.normalize_conical().unwrap();
        prop_assert!(c.rhs().iter().all(|&x| x == 0.0));
        for _ in 0..100 {
            let x = common::simplex_point(&mut rng, n);
            let a = p.slack(&x);
            let b = c.slack(&x);
            prop_assert!((a - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn stationary_vector_is_fixed(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = common::rng(seed);
        let chain = common::ergodic_chain(&mut rng, n);
        let info = chain.stationary().unwrap();
        prop_assert!((chain.matrix() * &info.v - &info.v).amax() <= 1e-12);
        prop_assert!((info.v.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(info.v.iter().all(|&x| x > 0.0));
        prop_assert!(info.rho < 1.0);
    }

    #[test]
    fn metropolis_hastings_is_reversible(seed in any::<u64>(), n in 2usize..15) {
        let mut rng = common::rng(seed);
        let graph = common::symmetric_graph(&mut rng, n, 0.2);
        let v = common::positive_distribution(&mut rng, n);
        let mh = MarkovChain::metropolis_hastings(&graph, &v).unwrap();
        prop_assert!(mh.respects_graph(&graph).unwrap());
        prop_assert!((mh.matrix() * &v - &v).amax() <= 1e-12);
        prop_assert!(mh.reversibility_residual(&v) <= 1e-12);
    }

    #[test]
    fn invariant_set_is_sound_and_maximal(seed in any::<u64>(), n in 3usize..7) {
        let mut rng = common::rng(seed);
        let chain = common::ergodic_chain(&mut rng, n);
        let v = chain.stationary().unwrap().v;
        let safe = common::safe_box(&mut rng, &v);
        let r = maximal_invariant_set(&chain, &safe, &InvariantOptions::default()).unwrap();
        let t = r.t_star().expect("strictly safe ergodic instance converges");

        let rows: Vec<usize> = r.history.iter().map(|h| h.rows).collect();
        prop_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(r.stacked.num_rows(), (t + 1) * r.block_rows);
        prop_assert!(r.verify_certificates(&chain).unwrap() <= 1e-8);
        let invariant = matches!(
            certify_invariance(&chain, &r.stacked, DEFAULT_LP_TOL).unwrap(),
            InvarianceVerdict::Invariant(_)
        );
        prop_assert!(invariant);

        for _ in 0..200 {
            let x = common::probe_point(&mut rng, &v);
            let margin = r.stacked.slack(&x).max().abs();
            if margin <= 1e-6 {
                continue;
            }
            if r.membership(&x).unwrap() {
                prop_assert!(common::safe_for(&chain, &safe, &x, 10 * t + 100, 1e-9));
            } else {
                let (k, _) = r.first_violation(&x).unwrap().expect("non-member has a violation");
                prop_assert!(k <= t);
                prop_assert!(!common::safe_for(&chain, &safe, &x, t, 0.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn synthesis_meets_its_guarantees(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = common::rng(seed);
        let graph = common::symmetric_graph(&mut rng, n, 0.25);
        let v = common::positive_distribution(&mut rng, n);
        let r = synthesize(&SynthesisProblem::new(graph.clone(), v.clone())).unwrap();
        prop_assert!(r.residuals.within(1e-7));
        prop_assert!(r.residuals.reversibility <= 1e-7);
        let chain = r.chain().unwrap();
        prop_assert!(chain.respects_graph(&graph).unwrap());
        let rho = chain.mixing_radius(&v);
        prop_assert!(rho <= r.lambda_star + 1e-6, "rho {rho} above lambda* {}", r.lambda_star);
        if let Some(base) = r.baseline_rho {
            prop_assert!(rho <= base + 1e-6);
        }

        let feasible = r.bisection.iter().filter_map(|s| match s.verdict {
            StepVerdict::Feasible { .. } => Some(s.lambda),
            _ => None,
        });
        let infeasible = r.bisection.iter().filter_map(|s| match s.verdict {
            StepVerdict::Feasible { .. } => None,
            _ => Some(s.lambda),
        });
        let lowest_feasible = feasible.fold(f64::INFINITY, f64::min);
        let highest_infeasible = infeasible.fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(highest_infeasible < lowest_feasible);
    }

    #[test]
    fn ensemble_conserves_agents(seed in any::<u64>(), n in 2usize..8, agents in 1usize..5000) {
        let mut rng = common::rng(seed);
        let chain = common::ergodic_chain(&mut rng, n);
        let x0 = common::simplex_point(&mut rng, n);
        let run = simulate_ensemble(&chain, &x0, agents, 10, seed).unwrap();
        prop_assert_eq!(run.counts.len(), 11);
        for row in &run.counts {
            prop_assert_eq!(row.iter().sum::<u64>(), agents as u64);
        }
        let again = simulate_ensemble(&chain, &x0, agents, 10, seed).unwrap();
        prop_assert_eq!(run, again);
    }
}
