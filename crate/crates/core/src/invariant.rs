//! Maximal positively invariant subsets of `Δ ∩ P(G, g)` under `x⁺ = Mx`.
//!
//! The iteration stacks `G, GM, …, GM^t` and stops at the first `t` for
//! which `Δ ∩ P(G_t, g_t) ⊆ P(GM^{t+1}, g)` is LP-certified.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::markov::{check_distribution, MarkovChain, MarkovError, DISTRIBUTION_TOL};
use crate::polytope::{
    nonempty_on_simplex, simplex_certificate, ContainmentCertificate, Nonempty, Polyhedron, PolytopeError, RowSearch,
    MEMBERSHIP_TOL,
};
use crate::solver::DEFAULT_LP_TOL;

/// Iteration cap used when no K-estimate is available.
pub const DEFAULT_CAP: usize = 1000;
/// Tolerance for re-verifying recorded certificates.
pub const CERTIFICATE_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum InvariantError {
    #[error("safe set must be restricted to the simplex")]
    NotOnSimplex,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("solver gave no verdict at iteration {t}: {message}")]
    SolverUnknown { t: usize, message: String },
    #[error("operation requires a converged result")]
    NotConverged,
    #[error("stationary point is not strictly safe (min slack {min_slack:e})")]
    NotStrictlySafe { min_slack: f64 },
    #[error("mixing radius {0} is not below 1")]
    RhoNotBelowOne(f64),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InvariantStatus {
    Converged { t_star: usize },
    /// The partial stack only guarantees safety for the next `t_reached`
    /// steps.
    IterationCapReached { t_reached: usize },
    EmptyConstraintSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum StopTest {
    Contained,
    NotContained { outer_row: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub rows: usize,
    pub test: StopTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantSetResult {
    pub status: InvariantStatus,
    /// Blocks `G, GM, …, GM^t` with `g` repeated.
    pub stacked: Polyhedron,
    /// Rows per block (rows of `G`).
    pub block_rows: usize,
    /// Multipliers for the final stopping test, one row per row of `GM^{t*+1}`.
    pub stopping_certificate: Option<ContainmentCertificate>,
    /// `Y` with `Y(G_t − g_t1ᵀ) ≥ (G_t − g_t1ᵀ)M`.
    pub invariance_certificate: Option<ContainmentCertificate>,
    pub history: Vec<IterationRecord>,
    pub k_estimate: Option<KEstimate>,
    pub cap: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub epsilon: f64,
    pub g_norm: f64,
    pub rho: f64,
    #[serde(rename = "K")]
    pub k: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantOptions {
    /// `None` picks `max(2K, 1000)`, or 1000 without a K-estimate.
    pub cap: Option<usize>,
    pub feas_tol: f64,
}

impl Default for InvariantOptions {
    fn default() -> Self {
        Self {
            cap: None,
            feas_tol: DEFAULT_LP_TOL,
        }
    }
}

/// `max(2K, 1000)` or 1000.
pub fn default_cap(k: Option<&KEstimate>) -> usize {
    k.map_or(DEFAULT_CAP, |k| {
        usize::try_from(k.k.saturating_mul(2)).unwrap_or(usize::MAX).max(DEFAULT_CAP)
    })
}

/// `ε = min(g − Gv)`, `‖G‖∞`, `ρ = ρ(M − v1ᵀ)` and
/// `K = ⌈log(ε/‖G‖∞) / log ρ⌉` (at least 1; `ρ = 0` gives 1).
pub fn k_estimate(chain: &MarkovChain, safe: &Polyhedron, v: &DVector<f64>) -> Result<KEstimate, InvariantError> {
    check_dims(chain, safe)?;
    check_distribution(v, chain.n(), DISTRIBUTION_TOL)?;
    if !chain.is_ergodic() {
        return Err(MarkovError::NotErgodic.into());
    }
    let epsilon = -safe.slack(v).max();
    if epsilon <= 0.0 || safe.num_rows() == 0 {
        return Err(InvariantError::NotStrictlySafe { min_slack: epsilon });
    }
    let g_norm = safe
        .matrix()
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let rho = chain.mixing_radius(v);
    if rho >= 1.0 {
        return Err(InvariantError::RhoNotBelowOne(rho));
    }
    let k = if rho <= 1e-12 || g_norm == 0.0 {
        1
    } else {
        let raw = ((epsilon / g_norm).ln() / rho.ln()).ceil();
        if raw.is_finite() {
            (raw.max(1.0)).min(u64::MAX as f64) as u64
        } else {
            u64::MAX
        }
    };
    Ok(KEstimate { epsilon, g_norm, rho, k })
}

fn check_dims(chain: &MarkovChain, safe: &Polyhedron) -> Result<(), InvariantError> {
    if chain.n() != safe.dim() {
        return Err(InvariantError::Dimension(format!(
            "chain has {} states, safe set lives in dimension {}",
            chain.n(),
            safe.dim()
        )));
    }
    Ok(())
}

/// Warnings about the termination hypotheses, plus the K-estimate when
/// they hold.
fn hypotheses(chain: &MarkovChain, safe: &Polyhedron) -> (Option<KEstimate>, Vec<String>) {
    let mut warnings = Vec::new();
    let info = match chain.stationary() {
        Ok(info) => info,
        Err(_) => {
            warnings.push("chain is not ergodic: finite termination is not guaranteed".to_string());
            return (None, warnings);
        }
    };
    let worst = safe.slack(&info.v).max();
    if worst >= 0.0 {
        let how = if worst <= MEMBERSHIP_TOL { "on the boundary of" } else { "outside" };
        warnings.push(format!(
            "stationary distribution lies {how} the safe set (max Gv - g = {worst:e}): finite termination is not guaranteed"
        ));
        return (None, warnings);
    }
    match k_estimate(chain, safe, &info.v) {
        Ok(k) => (Some(k), warnings),
        Err(e) => {
            warnings.push(format!("no iteration estimate: {e}"));
            (None, warnings)
        }
    }
}

/// Compose the invariance certificate for `Δ ∩ P(G_t, g_t)` from the
/// stopping certificate: block `k < t` maps to block `k + 1` by selection,
/// and block `t` uses the stopping multipliers.
fn compose_invariance(stop: &ContainmentCertificate, m: usize, t: usize) -> ContainmentCertificate {
    let cols = (t + 1) * m;
    let mut y = vec![vec![0.0; cols]; cols];
    for k in 0..t {
        for i in 0..m {
            y[k * m + i][(k + 1) * m + i] = 1.0;
        }
    }
    for i in 0..m {
        y[t * m + i].copy_from_slice(&stop.y[i]);
    }
    ContainmentCertificate { y, residual: 0.0 }
}

pub fn maximal_invariant_set(
    chain: &MarkovChain,
    safe: &Polyhedron,
    opts: &InvariantOptions,
) -> Result<InvariantSetResult, InvariantError> {
    if !safe.on_simplex() {
        return Err(InvariantError::NotOnSimplex);
    }
    check_dims(chain, safe)?;
    let (k_est, warnings) = hypotheses(chain, safe);
    for w in &warnings {
        log::warn!("{w}");
    }
    let cap = opts.cap.unwrap_or_else(|| default_cap(k_est.as_ref()));
    let m = safe.num_rows();
    let mut result = InvariantSetResult {
        status: InvariantStatus::EmptyConstraintSet,
        stacked: safe.clone(),
        block_rows: m,
        stopping_certificate: None,
        invariance_certificate: None,
        history: Vec::new(),
        k_estimate: k_est,
        cap,
        warnings,
    };
    match nonempty_on_simplex(safe, opts.feas_tol) {
        Nonempty::Yes(_) => {}
        Nonempty::No => return Ok(result),
        Nonempty::Unknown(message) => return Err(InvariantError::SolverUnknown { t: 0, message }),
    }

    let g_conical = safe.conical_matrix();
    let mut stacked_conical = g_conical.clone();
    // (G − g1ᵀ)M^{t+1} = GM^{t+1} − g1ᵀ because 1ᵀM = 1ᵀ.
    let mut next_block = &g_conical * chain.matrix();
    let mut next_raw = safe.matrix() * chain.matrix();
    let mut t = 0;
    loop {
        let rows = (t + 1) * m;
        match simplex_certificate(&stacked_conical, &next_block, opts.feas_tol) {
            RowSearch::Found(cert) => {
                result.history.push(IterationRecord { t, rows, test: StopTest::Contained });
                let mut inv = compose_invariance(&cert, m, t);
                let pre = result.stacked.preimage(chain.matrix())?;
                inv.residual = inv.simplex_violation(&result.stacked, &pre);
                if inv.residual > CERTIFICATE_TOL {
                    return Err(InvariantError::SolverUnknown {
                        t,
                        message: format!("invariance certificate residual {:e}", inv.residual),
                    });
                }
                result.stopping_certificate = Some(cert);
                result.invariance_certificate = Some(inv);
                result.status = InvariantStatus::Converged { t_star: t };
                return Ok(result);
            }
            RowSearch::Failed(outer_row) => {
                result.history.push(IterationRecord {
                    t,
                    rows,
                    test: StopTest::NotContained { outer_row },
                });
            }
            RowSearch::Unknown(_, message) => return Err(InvariantError::SolverUnknown { t, message }),
        }
        if t >= cap {
            result.status = InvariantStatus::IterationCapReached { t_reached: t };
            log::warn!("iteration cap {cap} reached: the partial set only guarantees safety for the next {t} steps");
            return Ok(result);
        }
        let block = Polyhedron::new(next_raw.clone(), safe.rhs().clone(), true)?;
        result.stacked = result.stacked.intersect(&block)?;
        stacked_conical = stack_rows(&stacked_conical, &next_block);
        next_block = &next_block * chain.matrix();
        next_raw = &next_raw * chain.matrix();
        t += 1;
    }
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

impl InvariantSetResult {
    pub fn t_star(&self) -> Option<usize> {
        match self.status {
            InvariantStatus::Converged { t_star } => Some(t_star),
            _ => None,
        }
    }

    /// `x0 ∈ Δ` and `G_{t*} x0 ≤ g_{t*} + 1e-9`.
    pub fn membership(&self, x0: &DVector<f64>) -> Result<bool, InvariantError> {
        if self.t_star().is_none() {
            return Err(InvariantError::NotConverged);
        }
        check_distribution(x0, self.stacked.dim(), DISTRIBUTION_TOL)?;
        Ok(self.stacked.contains_point(x0, MEMBERSHIP_TOL))
    }

    /// First `(k, row)` with `(GM^k x0)_row > g_row + 1e-9`, checking the
    /// stacked rows in order.
    pub fn first_violation(&self, x0: &DVector<f64>) -> Result<Option<(usize, usize)>, InvariantError> {
        check_distribution(x0, self.stacked.dim(), DISTRIBUTION_TOL)?;
        let s = self.stacked.slack(x0);
        Ok(s.iter()
            .position(|v| *v > MEMBERSHIP_TOL)
            .map(|i| (i / self.block_rows.max(1), i % self.block_rows.max(1))))
    }

    /// Re-check both recorded certificates from scratch.
    pub fn verify_certificates(&self, chain: &MarkovChain) -> Result<f64, InvariantError> {
        let (Some(t), Some(stop), Some(inv)) =
            (self.t_star(), &self.stopping_certificate, &self.invariance_certificate)
        else {
            return Err(InvariantError::NotConverged);
        };
        let safe = self.stacked.rows(0, self.block_rows);
        let mut mk = chain.matrix().clone();
        for _ in 0..t {
            mk = &mk * chain.matrix();
        }
        let next = safe.preimage(&mk)?;
        let pre = self.stacked.preimage(chain.matrix())?;
        Ok(stop
            .simplex_violation(&self.stacked, &next)
            .max(inv.simplex_violation(&self.stacked, &pre)))
    }

    /// `t,rows,verdict` per iteration.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("t,rows,verdict\n");
        for r in &self.history {
            let verdict = match r.test {
                StopTest::Contained => "contained".to_string(),
                StopTest::NotContained { outer_row } => format!("not_contained(row {outer_row})"),
            };
            let _ = writeln!(out, "{},{},\"{}\"", r.t, r.rows, verdict);
        }
        out
    }
}

/// `GM^k x0 ≤ g + 1e-9` for `k = 0..=horizon`, by propagation.
pub fn stepwise_safe(
    chain: &MarkovChain,
    safe: &Polyhedron,
    x0: &DVector<f64>,
    horizon: usize,
    tol: f64,
) -> Result<bool, InvariantError> {
    check_dims(chain, safe)?;
    for x in chain.trajectory(x0)?.take(horizon + 1) {
        if safe.slack(&x).max() > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub enum InvarianceVerdict {
    Invariant(ContainmentCertificate),
    NotInvariant,
    /// `Δ ∩ P` is empty, hence invariant vacuously.
    Empty,
    Unknown(String),
}

/// Is `Δ ∩ P` positively invariant? The simplex restriction is implied
/// whatever `on_simplex` says.
pub fn certify_invariance(chain: &MarkovChain, p: &Polyhedron, feas_tol: f64) -> Result<InvarianceVerdict, InvariantError> {
    check_dims(chain, p)?;
    let p = p.clone().with_simplex(true);
    match nonempty_on_simplex(&p, feas_tol) {
        Nonempty::Yes(_) => {}
        Nonempty::No => return Ok(InvarianceVerdict::Empty),
        Nonempty::Unknown(msg) => return Ok(InvarianceVerdict::Unknown(msg)),
    }
    let pre = p.preimage(chain.matrix())?;
    Ok(match simplex_certificate(&p.conical_matrix(), &pre.conical_matrix(), feas_tol) {
        RowSearch::Found(mut cert) => {
            cert.residual = cert.simplex_violation(&p, &pre);
            if cert.residual <= CERTIFICATE_TOL {
                InvarianceVerdict::Invariant(cert)
            } else {
                InvarianceVerdict::Unknown(format!("certificate residual {:e}", cert.residual))
            }
        }
        RowSearch::Failed(_) => InvarianceVerdict::NotInvariant,
        RowSearch::Unknown(i, msg) => InvarianceVerdict::Unknown(format!("row {i}: {msg}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{example_matrix, example_safe_set, example_stationary};
    use crate::markov::STOCHASTIC_TOL;

    fn example_chain() -> MarkovChain {
        MarkovChain::new(example_matrix(), STOCHASTIC_TOL).unwrap()
    }

    #[test]
    fn example_terminates_at_one() {
        let chain = example_chain();
        let r = maximal_invariant_set(&chain, &example_safe_set(), &InvariantOptions::default()).unwrap();
        assert_eq!(r.status, InvariantStatus::Converged { t_star: 1 });
        assert_eq!(r.stacked.num_rows(), 6);
        assert!(r.verify_certificates(&chain).unwrap() <= CERTIFICATE_TOL);
        assert!(r.warnings.is_empty());
        assert_eq!(r.k_estimate.as_ref().unwrap().k, 6);
        assert_eq!(r.cap, 1000);
        assert_eq!(r.history.len(), 2);
        assert_eq!(r.history_csv().lines().count(), 3);
    }

    #[test]
    fn simplex_safe_set_is_immediate() {
        let chain = example_chain();
        let r = maximal_invariant_set(&chain, &Polyhedron::simplex(3), &InvariantOptions::default()).unwrap();
        assert_eq!(r.status, InvariantStatus::Converged { t_star: 0 });
    }

    #[test]
    fn empty_safe_set() {
        let chain = example_chain();
        let p = Polyhedron::upper_bounds(DVector::from_element(3, 0.2)).unwrap();
        let r = maximal_invariant_set(&chain, &p, &InvariantOptions::default()).unwrap();
        assert_eq!(r.status, InvariantStatus::EmptyConstraintSet);
        assert!(r.membership(&example_stationary()).is_err());
    }

    #[test]
    fn cap_reached_is_reported() {
        let chain = example_chain();
        let opts = InvariantOptions { cap: Some(0), ..Default::default() };
        let r = maximal_invariant_set(&chain, &example_safe_set(), &opts).unwrap();
        assert_eq!(r.status, InvariantStatus::IterationCapReached { t_reached: 0 });
    }

    #[test]
    fn membership_agrees_with_stepwise() {
        let chain = example_chain();
        let safe = example_safe_set();
        let r = maximal_invariant_set(&chain, &safe, &InvariantOptions::default()).unwrap();
        assert!(r.membership(&example_stationary()).unwrap());
        let x = DVector::from_vec(vec![0.6, 0.2, 0.2]);
        let stacked = r.membership(&x).unwrap();
        let stepwise = stepwise_safe(&chain, &safe, &x, 1, MEMBERSHIP_TOL).unwrap();
        assert_eq!(stacked, stepwise);
        // M x = [0.52, 0.34, 0.14] is safe, so x is accepted.
        assert!(stacked);
        let bad = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        assert!(!r.membership(&bad).unwrap());
        assert_eq!(r.first_violation(&bad).unwrap(), Some((0, 2)));
        assert!(r.membership(&DVector::from_vec(vec![0.5, 0.5, 0.5])).is_err());
    }

    #[test]
    fn invariance_examples() {
        let chain = example_chain();
        assert!(matches!(
            certify_invariance(&chain, &Polyhedron::simplex(3), DEFAULT_LP_TOL).unwrap(),
            InvarianceVerdict::Invariant(_)
        ));
        assert_eq!(
            certify_invariance(&chain, &example_safe_set(), DEFAULT_LP_TOL).unwrap(),
            InvarianceVerdict::NotInvariant
        );
        let r = maximal_invariant_set(&chain, &example_safe_set(), &InvariantOptions::default()).unwrap();
        assert!(matches!(
            certify_invariance(&chain, &r.stacked, DEFAULT_LP_TOL).unwrap(),
            InvarianceVerdict::Invariant(_)
        ));
        let empty = Polyhedron::upper_bounds(DVector::from_element(3, 0.2)).unwrap();
        assert_eq!(certify_invariance(&chain, &empty, DEFAULT_LP_TOL).unwrap(), InvarianceVerdict::Empty);
    }

    #[test]
    fn k_estimate_examples() {
        let chain = example_chain();
        let k = k_estimate(&chain, &example_safe_set(), &example_stationary()).unwrap();
        assert!((k.epsilon - 0.125).abs() < 1e-12);
        assert!((k.g_norm - 1.0).abs() < 1e-15);
        assert!((k.rho - 0.7).abs() < 1e-9);
        assert_eq!(k.k, 6);
        assert_eq!(default_cap(Some(&k)), 1000);

        let v = DVector::from_vec(vec![0.5, 0.3, 0.2]);
        let rank_one = MarkovChain::new(&v * DVector::from_element(3, 1.0).transpose(), STOCHASTIC_TOL).unwrap();
        let k = k_estimate(&rank_one, &example_safe_set(), &v).unwrap();
        assert_eq!(k.k, 1);

        let tight = Polyhedron::upper_bounds(DVector::from_vec(vec![0.375, 0.5, 0.5])).unwrap();
        assert!(matches!(
            k_estimate(&chain, &tight, &example_stationary()),
            Err(InvariantError::NotStrictlySafe { .. })
        ));
    }

    #[test]
    fn boundary_stationary_point_warns() {
        let chain = example_chain();
        let tight = Polyhedron::upper_bounds(DVector::from_vec(vec![0.375, 0.5, 0.5])).unwrap();
        let r = maximal_invariant_set(&chain, &tight, &InvariantOptions { cap: Some(30), ..Default::default() }).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("not guaranteed"));
    }

    #[test]
    fn json_round_trip() {
        let chain = example_chain();
        let r = maximal_invariant_set(&chain, &example_safe_set(), &InvariantOptions::default()).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: InvariantSetResult = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
