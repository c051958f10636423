//! Seeded random instances shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safechain::markov::{Graph, MarkovChain, STOCHASTIC_TOL};
use safechain::polytope::Polyhedron;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Column-stochastic chain with positive diagonal and a Hamiltonian cycle,
/// hence ergodic. About 30% of the other entries are zero.
pub fn ergodic_chain(rng: &mut ChaCha8Rng, n: usize) -> MarkovChain {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let forced = i == j || i == (j + 1) % n;
            if forced || rng.random::<f64>() > 0.3 {
                m[(i, j)] = rng.random_range(0.05..1.0);
            }
        }
        let s = m.column(j).sum();
        m.column_mut(j).scale_mut(1.0 / s);
    }
    MarkovChain::new(m, STOCHASTIC_TOL).expect("normalized columns")
}

/// Random constraints with `Gv < g` strictly: upper bounds on every state,
/// lower bounds on some, and up to two dense rows.
pub fn safe_box(rng: &mut ChaCha8Rng, v: &DVector<f64>) -> Polyhedron {
    let n = v.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        let mut r = vec![0.0; n];
        r[i] = 1.0;
        rows.push(r);
        rhs.push(v[i] + rng.random_range(0.01..0.35));
        if v[i] > 0.05 && rng.random::<f64>() < 0.5 {
            let mut r = vec![0.0; n];
            r[i] = -1.0;
            rows.push(r);
            rhs.push(-(v[i] - rng.random_range(0.01..v[i])));
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at_v: f64 = r.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        rows.push(r);
        rhs.push(at_v + rng.random_range(0.01..0.3));
    }
    let m = rows.len();
    let g = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    Polyhedron::new(g, DVector::from_vec(rhs), true).unwrap()
}

/// A point of Δ drawn uniformly (flat Dirichlet).
pub fn simplex_point(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    DVector::from_iterator(n, e.into_iter().map(|x| x / s))
}

/// Mixture `v + s(d − v)` so that samples straddle the safe boundary.
pub fn probe_point(rng: &mut ChaCha8Rng, v: &DVector<f64>) -> DVector<f64> {
    let d = simplex_point(rng, v.len());
    let s = rng.random::<f64>();
    v + (d - v) * s
}

/// Connected symmetric graph with self-loops: a random spanning tree plus
/// extra edges with probability `p`.
pub fn symmetric_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Graph {
    let mut adj = vec![vec![false; n]; n];
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = true;
    }
    for i in 1..n {
        let j = rng.random_range(0..i);
        adj[i][j] = true;
        adj[j][i] = true;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
    }
    Graph::from_bool(adj).unwrap()
}

/// Positive distribution bounded away from zero.
pub fn positive_distribution(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    DVector::from_iterator(n, w.into_iter().map(|x| x / s))
}

/// `Gx[k] ≤ g + tol` for all `k ≤ horizon`.
pub fn safe_for(chain: &MarkovChain, safe: &Polyhedron, x0: &DVector<f64>, horizon: usize, tol: f64) -> bool {
    let mut x = x0.clone();
    for k in 0..=horizon {
        if k > 0 {
            x = chain.matrix() * &x;
        }
        if safe.slack(&x).max() > tol {
            return false;
        }
    }
    true
}
