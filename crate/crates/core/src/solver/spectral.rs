//! Spectral-interval feasibility: does some parameter vector `p` satisfy the
//! linear constraints while every eigenvalue of the symmetric `S(p)` lies in
//! `[-λ, λ]`?
//!
//! Each query runs the barrier method on the epigraph form
//! `min t  s.t.  tI - S(p) ⪰ 0, tI + S(p) ⪰ 0` and stops as soon as the
//! lower bound on `t` clears `λ`. Feasible witnesses are refined to the
//! optimum and re-verified with [`symmetric_eigenvalues`], so solver
//! trouble surfaces as `NumericalFailure` rather than a wrong verdict.

use nalgebra::{DMatrix, DVector};

use super::eigen::symmetric_eigenvalues;
use super::interior::relative_interior;
use super::lmi::{barrier_minimize, AffineSym, BarrierOptions, BarrierStatus, LmiProgram, SymTriplets};
use super::SolverError;

pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-7;

/// Affine map from parameters to an `n × n` (not necessarily symmetric)
/// matrix: `M(p) = M0 + Σ p_k M_k`, with `M_k` stored as `(row, col, value)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMatrix {
    pub constant: DMatrix<f64>,
    pub coeffs: Vec<Vec<(usize, usize, f64)>>,
}

impl AffineMatrix {
    pub fn eval(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, terms) in self.coeffs.iter().enumerate() {
            for &(i, j, v) in terms {
                m[(i, j)] += v * p[k];
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct SpectralFeasibilityProblem {
    pub dim: usize,
    pub nparams: usize,
    /// Symmetric matrix whose spectrum is constrained.
    pub s_map: AffineSym,
    /// The Markov matrix the parameters describe.
    pub m_map: AffineMatrix,
    /// `A p ≤ b`.
    pub ineq_a: DMatrix<f64>,
    pub ineq_b: DVector<f64>,
    /// `E p = e`.
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    pub lambda: f64,
}

impl SpectralFeasibilityProblem {
    pub fn validate(&self) -> Result<(), SolverError> {
        let p = self.nparams;
        let n = self.dim;
        let ok = self.s_map.dim == n
            && self.s_map.coeffs.len() == p
            && self.m_map.constant.nrows() == n
            && self.m_map.constant.ncols() == n
            && self.m_map.coeffs.len() == p
            && self.ineq_a.ncols() == p
            && self.ineq_a.nrows() == self.ineq_b.len()
            && self.eq_a.ncols() == p
            && self.eq_a.nrows() == self.eq_b.len();
        if !ok {
            return Err(SolverError::Dimension("inconsistent spectral parametrization".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SolverError::Domain(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    /// Max violation of the linear constraints at `p`.
    pub fn linear_violation(&self, p: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        if self.ineq_a.nrows() > 0 {
            worst = worst.max((&self.ineq_a * p - &self.ineq_b).max().max(0.0));
        }
        if self.eq_a.nrows() > 0 {
            worst = worst.max((&self.eq_a * p - &self.eq_b).amax());
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpectralOutcome {
    Feasible {
        m: DMatrix<f64>,
        s: DMatrix<f64>,
        params: DVector<f64>,
        /// max |eig(S)| of the witness.
        spectral_norm: f64,
    },
    Infeasible,
    NumericalFailure(String),
}

impl SpectralOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, SpectralOutcome::Feasible { .. })
    }
}

/// One-shot feasibility query.
pub fn spectral_feasible(problem: &SpectralFeasibilityProblem, feas_tol: f64) -> SpectralOutcome {
    match SpectralSolver::new(problem.clone(), feas_tol) {
        Ok(solver) => solver.feasible_at(problem.lambda),
        Err(SolverError::Infeasible) => SpectralOutcome::Infeasible,
        Err(e) => SpectralOutcome::NumericalFailure(e.to_string()),
    }
}

/// Reusable solver: the relative-interior search over the linear
/// constraints runs once and is shared by all λ queries.
#[derive(Clone, Debug)]
pub struct SpectralSolver {
    problem: SpectralFeasibilityProblem,
    feas_tol: f64,
    start: DVector<f64>,
    strict_rows: Vec<usize>,
    eq_a: DMatrix<f64>,
    eq_b: DVector<f64>,
}

impl SpectralSolver {
    /// Errors with [`SolverError::Infeasible`] when the linear constraints
    /// alone are infeasible.
    pub fn new(problem: SpectralFeasibilityProblem, feas_tol: f64) -> Result<Self, SolverError> {
        problem.validate()?;
        let ip = relative_interior(&problem.ineq_a, &problem.ineq_b, &problem.eq_a, &problem.eq_b, feas_tol * 1e-2)?
            .ok_or(SolverError::Infeasible)?;
        let p = problem.nparams;
        let implicit = &ip.implicit_equalities;
        let q = problem.eq_a.nrows();
        let mut eq_a = DMatrix::zeros(q + implicit.len(), p);
        let mut eq_b = DVector::zeros(q + implicit.len());
        eq_a.rows_mut(0, q).copy_from(&problem.eq_a);
        eq_b.rows_mut(0, q).copy_from(&problem.eq_b);
        for (k, &i) in implicit.iter().enumerate() {
            eq_a.row_mut(q + k).copy_from(&problem.ineq_a.row(i));
            eq_b[q + k] = problem.ineq_b[i];
        }
        if !implicit.is_empty() {
            log::debug!("{} inequality rows are implicit equalities", implicit.len());
        }
        Ok(Self {
            start: ip.x,
            strict_rows: ip.strict_rows,
            problem,
            feas_tol,
            eq_a,
            eq_b,
        })
    }

    pub fn problem(&self) -> &SpectralFeasibilityProblem {
        &self.problem
    }

    /// Strictly feasible parameters for the linear part.
    pub fn interior_start(&self) -> &DVector<f64> {
        &self.start
    }

    fn linear_rows(&self, extra_cols: usize) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let p = self.problem.nparams;
        let nv = p + extra_cols;
        let mut a = DMatrix::zeros(self.strict_rows.len(), nv);
        let mut b = DVector::zeros(self.strict_rows.len());
        for (k, &i) in self.strict_rows.iter().enumerate() {
            a.view_mut((k, 0), (1, p)).copy_from(&self.problem.ineq_a.row(i));
            b[k] = self.problem.ineq_b[i];
        }
        let mut e = DMatrix::zeros(self.eq_a.nrows(), nv);
        e.view_mut((0, 0), (self.eq_a.nrows(), p)).copy_from(&self.eq_a);
        (a, b, e, self.eq_b.clone())
    }

    /// `±S(p) + t I ⪰ 0` blocks over variables `(p, t)`.
    fn epigraph_program(&self) -> LmiProgram {
        let p = self.problem.nparams;
        let n = self.problem.dim;
        let mut prog = LmiProgram::new(p + 1);
        prog.objective[p] = 1.0;
        for sign in [-1.0, 1.0] {
            let mut blk = AffineSym::new(n, p + 1);
            blk.constant = scaled(&self.problem.s_map.constant, sign);
            for k in 0..p {
                blk.coeffs[k] = scaled(&self.problem.s_map.coeffs[k], sign);
            }
            for i in 0..n {
                blk.coeffs[p].add(i, i, 1.0);
            }
            prog.blocks.push(blk);
        }
        let (a, b, e, eb) = self.linear_rows(1);
        prog.ineq_a = a;
        prog.ineq_b = b;
        prog.eq_a = e;
        prog.eq_b = eb;
        prog
    }

    fn s_at(&self, params: &DVector<f64>) -> DMatrix<f64> {
        self.problem.s_map.eval(params)
    }

    /// Minimize `max |eig S(p)|`, stopping early once it provably exceeds
    /// `stop_above`.
    pub fn minimize_norm(&self, stop_above: Option<f64>) -> Result<(DVector<f64>, f64, f64, BarrierStatus), SolverError> {
        let prog = self.epigraph_program();
        let norm0 = spectral_norm(&self.s_at(&self.start))?;
        let mut x0 = DVector::zeros(self.problem.nparams + 1);
        x0.rows_mut(0, self.problem.nparams).copy_from(&self.start);
        x0[self.problem.nparams] = norm0 + 1.0;
        let opts = BarrierOptions {
            gap_tol: (self.feas_tol * 1e-2).max(1e-11),
            stop_above,
            ..BarrierOptions::default()
        };
        let r = barrier_minimize(&prog, &x0, &opts)?;
        let params = r.x.rows(0, self.problem.nparams).into_owned();
        Ok((params, r.objective, r.lower_bound, r.status))
    }

    /// Feasibility at `lambda` (the problem's own λ is ignored).
    pub fn feasible_at(&self, lambda: f64) -> SpectralOutcome {
        if !(0.0..=1.0).contains(&lambda) {
            return SpectralOutcome::NumericalFailure(format!("lambda {lambda} outside [0, 1]"));
        }
        let bound = lambda + self.feas_tol;
        match self.minimize_norm(Some(bound)) {
            Err(e) => SpectralOutcome::NumericalFailure(e.to_string()),
            Ok((params, _, lower, status)) => {
                let witness = self.verify(&params, bound);
                match (status, witness) {
                    (_, Some(out)) => out,
                    (BarrierStatus::BoundedAbove, None) => SpectralOutcome::Infeasible,
                    (BarrierStatus::Converged, None) if lower > bound => SpectralOutcome::Infeasible,
                    (status, None) => SpectralOutcome::NumericalFailure(format!(
                        "no verdict at lambda {lambda} (barrier status {status:?}, lower bound {lower:e})"
                    )),
                }
            }
        }
    }

    /// Re-check a parameter vector independently of the barrier solver.
    pub fn verify(&self, params: &DVector<f64>, bound: f64) -> Option<SpectralOutcome> {
        if self.problem.linear_violation(params) > self.feas_tol {
            return None;
        }
        let s = self.s_at(params);
        let norm = spectral_norm(&s).ok()?;
        if norm > bound {
            return None;
        }
        Some(SpectralOutcome::Feasible {
            m: self.problem.m_map.eval(params),
            s,
            params: params.clone(),
            spectral_norm: norm,
        })
    }

    /// Minimize `cost·p` subject to the linear constraints and
    /// `-λI ⪯ S(p) ⪯ λI`, starting from `start`, which must satisfy the
    /// spectral constraint strictly.
    pub fn minimize_linear(
        &self,
        lambda: f64,
        cost: &DVector<f64>,
        start: &DVector<f64>,
    ) -> Result<SpectralOutcome, SolverError> {
        let p = self.problem.nparams;
        let n = self.problem.dim;
        let mut prog = LmiProgram::new(p);
        prog.objective = cost.clone();
        for sign in [-1.0, 1.0] {
            let mut blk = AffineSym::new(n, p);
            blk.constant = scaled(&self.problem.s_map.constant, sign);
            for i in 0..n {
                blk.constant.add(i, i, lambda);
            }
            for k in 0..p {
                blk.coeffs[k] = scaled(&self.problem.s_map.coeffs[k], sign);
            }
            prog.blocks.push(blk);
        }
        let (a, b, e, eb) = self.linear_rows(0);
        prog.ineq_a = a;
        prog.ineq_b = b;
        prog.eq_a = e;
        prog.eq_b = eb;
        let opts = BarrierOptions {
            gap_tol: 1e-9,
            ..BarrierOptions::default()
        };
        let r = barrier_minimize(&prog, start, &opts)?;
        Ok(self
            .verify(&r.x, lambda + self.feas_tol)
            .unwrap_or_else(|| SpectralOutcome::NumericalFailure("objective witness failed re-verification".into())))
    }
}

fn scaled(t: &SymTriplets, s: f64) -> SymTriplets {
    t.scaled(s)
}

fn spectral_norm(s: &DMatrix<f64>) -> Result<f64, SolverError> {
    let ev = symmetric_eigenvalues(s)?;
    Ok(ev.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}
