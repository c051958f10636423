//! Values below are worked out by hand for the reference instances.

use nalgebra::{DMatrix, DVector};

use safechain::fixtures::{example_matrix, example_safe_set};
use safechain::gridworld::GridWorld;
use safechain::invariant::{k_estimate, maximal_invariant_set, InvariantOptions, InvariantStatus};
use safechain::markov::{Graph, MarkovChain, STOCHASTIC_TOL};
use safechain::synthesis::{synthesize, SynthesisProblem};

fn example() -> MarkovChain {
    MarkovChain::new(example_matrix(), STOCHASTIC_TOL).unwrap()
}

#[test]
fn example_spectrum() {
    // Characteristic polynomial (z − 1)(z − 0.7)(z + 0.6): trace 1.1, det −0.42.
    let m = example_matrix();
    assert!((m.trace() - 1.1).abs() < 1e-15);
    assert!((m.determinant() + 0.42).abs() < 1e-15);
    let info = example().stationary().unwrap();
    assert!((info.rho - 0.7).abs() < 1e-12);
    assert!((&info.v - DVector::from_vec(vec![0.375, 0.375, 0.25])).amax() < 1e-12);
}

#[test]
fn example_k_estimate() {
    // ε = min(0.6 − 0.375, 0.5 − 0.375, 0.5 − 0.25) = 0.125, ‖I‖∞ = 1,
    // ln(0.125)/ln(0.7) = 5.83…
    let chain = example();
    let v = chain.stationary().unwrap().v;
    let k = k_estimate(&chain, &example_safe_set(), &v).unwrap();
    assert!((k.epsilon - 0.125).abs() < 1e-12);
    assert_eq!(k.g_norm, 1.0);
    assert_eq!(k.k, 6);
}

#[test]
fn example_invariant_set() {
    let chain = example();
    let r = maximal_invariant_set(&chain, &example_safe_set(), &InvariantOptions::default()).unwrap();
    assert_eq!(r.status, InvariantStatus::Converged { t_star: 1 });
    let expected = DMatrix::from_row_slice(
        6,
        3,
        &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.8, 0.2, 0.0, 0.2, 0.2, 0.9, 0.0, 0.6, 0.1],
    );
    assert!((r.stacked.matrix() - expected).amax() < 1e-15);

    // [0.5, 0.5, 0] → [0.5, 0.2, 0.3] → [0.44, 0.41, 0.15]: stays safe.
    assert!(r.membership(&DVector::from_vec(vec![0.5, 0.5, 0.0])).unwrap());
    // [0.1, 0.4, 0.5] → [0.16, 0.55, 0.29]: state 1 exceeds 0.5 after one step.
    let x = DVector::from_vec(vec![0.1, 0.4, 0.5]);
    assert!(!r.membership(&x).unwrap());
    assert_eq!(r.first_violation(&x).unwrap(), Some((1, 1)));
}

#[test]
fn metropolis_hastings_two_states() {
    // Proposal 1/2 each way; acceptance 1 towards the heavier state, 1/3 back.
    let v = DVector::from_vec(vec![0.25, 0.75]);
    let mh = MarkovChain::metropolis_hastings(&Graph::path(2, true), &v).unwrap();
    let expected = DMatrix::from_row_slice(2, 2, &[0.5, 1.0 / 6.0, 0.5, 5.0 / 6.0]);
    assert!((mh.matrix() - &expected).amax() < 1e-15);
    // Second eigenvalue = trace − 1 = 1/3.
    assert!((mh.mixing_radius(&v) - 1.0 / 3.0).abs() < 1e-12);

    // Two states allow the rank-one chain v1ᵀ, which mixes in one step.
    let r = synthesize(&SynthesisProblem::new(Graph::path(2, true), v.clone())).unwrap();
    assert!(r.lambda_star <= 1e-4);
    assert!((r.baseline_rho.unwrap() - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn canonical_grid_target() {
    // 49 cells, 5 obstacles; four corners hold 0.225 each, 40 cells share 0.1.
    let grid = GridWorld::canonical();
    assert_eq!(grid.num_states(), 44);
    assert!((grid.floor_mass() - 0.0025).abs() < 1e-15);
    let sc = grid.build().unwrap();
    assert!((sc.v.sum() - 1.0).abs() < 1e-12);
    assert_eq!(sc.v.iter().filter(|&&x| x == 0.225).count(), 4);
}
