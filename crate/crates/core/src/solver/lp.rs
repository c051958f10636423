//! Dense two-phase simplex for the small linear programs that back the
//! containment certificates and the interior-point search of the LMI solver.
//!
//! Problems are stated in "natural" form: a constraint matrix with a per-row
//! sense and a per-variable sign restriction. Free variables are split, rows
//! are equilibrated, and the tableau is run with Dantzig pricing that falls
//! back to Bland's rule once degenerate pivots start repeating.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SolverError;

/// Row sense of a linear constraint `a·x (sense) b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Clone, Debug)]
pub struct LpFeasibilityProblem {
    matrix: DMatrix<f64>,
    rhs: DVector<f64>,
    sense: Vec<Sense>,
    nonneg: Vec<bool>,
}

impl LpFeasibilityProblem {
    pub fn new(
        matrix: DMatrix<f64>,
        rhs: DVector<f64>,
        sense: Vec<Sense>,
        nonneg: Vec<bool>,
    ) -> Result<Self, SolverError> {
        if matrix.nrows() != rhs.len() || sense.len() != rhs.len() {
            return Err(SolverError::Dimension(format!(
                "constraint matrix has {} rows, rhs {} entries, sense {} entries",
                matrix.nrows(),
                rhs.len(),
                sense.len()
            )));
        }
        if nonneg.len() != matrix.ncols() {
            return Err(SolverError::Dimension(format!(
                "constraint matrix has {} columns but sign mask has {} entries",
                matrix.ncols(),
                nonneg.len()
            )));
        }
        if matrix.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite);
        }
        Ok(Self {
            matrix,
            rhs,
            sense,
            nonneg,
        })
    }

    /// All variables nonnegative.
    pub fn nonneg(
        matrix: DMatrix<f64>,
        rhs: DVector<f64>,
        sense: Vec<Sense>,
    ) -> Result<Self, SolverError> {
        let p = matrix.ncols();
        Self::new(matrix, rhs, sense, vec![true; p])
    }

    pub fn num_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn sense(&self) -> &[Sense] {
        &self.sense
    }

    pub fn nonneg_mask(&self) -> &[bool] {
        &self.nonneg
    }

    /// Largest violation of any row or sign restriction at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.matrix * x;
        let mut worst: f64 = 0.0;
        for (i, sense) in self.sense.iter().enumerate() {
            let d = ax[i] - self.rhs[i];
            let v = match sense {
                Sense::Le => d.max(0.0),
                Sense::Ge => (-d).max(0.0),
                Sense::Eq => d.abs(),
            };
            worst = worst.max(v);
        }
        for (j, &nn) in self.nonneg.iter().enumerate() {
            if nn {
                worst = worst.max(-x[j]);
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpStatus {
    Feasible(DVector<f64>),
    Infeasible,
    NumericalFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpOutcome {
    pub status: LpStatus,
    /// Max constraint violation of the witness; `f64::INFINITY` without one.
    pub residual: f64,
}

impl LpOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self.status, LpStatus::Feasible(_))
    }

    pub fn witness(&self) -> Option<&DVector<f64>> {
        match &self.status {
            LpStatus::Feasible(x) => Some(x),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpSolution {
    Optimal { x: DVector<f64>, objective: f64 },
    Infeasible,
    Unbounded,
    NumericalFailure,
}

/// Decide whether the constraint system has a point within `feas_tol`.
pub fn lp_feasible(problem: &LpFeasibilityProblem, feas_tol: f64) -> LpOutcome {
    if problem.num_rows() == 0 {
        let x = DVector::zeros(problem.num_vars());
        return LpOutcome {
            status: LpStatus::Feasible(x),
            residual: 0.0,
        };
    }
    match Simplex::build(problem).run(None, feas_tol) {
        RunResult::Solved(x) => {
            let residual = problem.max_violation(&x);
            if residual <= feas_tol {
                LpOutcome {
                    status: LpStatus::Feasible(x),
                    residual,
                }
            } else {
                log::debug!("simplex witness residual {residual:e} exceeds {feas_tol:e}");
                LpOutcome {
                    status: LpStatus::NumericalFailure,
                    residual,
                }
            }
        }
        RunResult::Infeasible => LpOutcome {
            status: LpStatus::Infeasible,
            residual: f64::INFINITY,
        },
        RunResult::Unbounded | RunResult::Failed => LpOutcome {
            status: LpStatus::NumericalFailure,
            residual: f64::INFINITY,
        },
    }
}

/// Minimize `cost·x` over the constraint system.
pub fn lp_minimize(problem: &LpFeasibilityProblem, cost: &DVector<f64>, feas_tol: f64) -> LpSolution {
    assert_eq!(cost.len(), problem.num_vars(), "cost length must match variable count");
    match Simplex::build(problem).run(Some(cost), feas_tol) {
        RunResult::Solved(x) => {
            if problem.max_violation(&x) > feas_tol {
                return LpSolution::NumericalFailure;
            }
            let objective = cost.dot(&x);
            LpSolution::Optimal { x, objective }
        }
        RunResult::Infeasible => LpSolution::Infeasible,
        RunResult::Unbounded => LpSolution::Unbounded,
        RunResult::Failed => LpSolution::NumericalFailure,
    }
}

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-10;
const BLAND_AFTER: usize = 50;

enum RunResult {
    Solved(DVector<f64>),
    Infeasible,
    Unbounded,
    Failed,
}

/// Column origin in the standard-form tableau.
#[derive(Clone, Copy, Debug, PartialEq)]
enum ColKind {
    /// Original variable `j`, with sign (+1 or -1 for the negative part of a free variable).
    Var(usize, f64),
    Slack,
    Artificial,
}

struct Simplex {
    m: usize,
    ncols: usize,
    /// Row-major (m + 1) x (ncols + 1); last row is the reduced-cost row,
    /// last column the right-hand side.
    tab: Vec<f64>,
    basis: Vec<usize>,
    kinds: Vec<ColKind>,
    /// Standard-form data kept for the final basis re-solve.
    a_std: DMatrix<f64>,
    b_std: DVector<f64>,
    num_orig: usize,
}

impl Simplex {
    fn build(problem: &LpFeasibilityProblem) -> Self {
        let m = problem.num_rows();
        let mut kinds = Vec::new();
        for (j, &nn) in problem.nonneg.iter().enumerate() {
            kinds.push(ColKind::Var(j, 1.0));
            if !nn {
                kinds.push(ColKind::Var(j, -1.0));
            }
        }
        let num_struct = kinds.len();

        // Equilibrate rows, make rhs nonnegative.
        let mut rows: Vec<(Vec<f64>, f64, Sense)> = Vec::with_capacity(m);
        for i in 0..m {
            let row = problem.matrix.row(i);
            let mut scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if scale < 1e-300 {
                scale = problem.rhs[i].abs().max(1.0);
            }
            let mut coeffs: Vec<f64> = kinds[..num_struct]
                .iter()
                .map(|k| match k {
                    ColKind::Var(j, s) => s * row[*j] / scale,
                    _ => unreachable!(),
                })
                .collect();
            let mut b = problem.rhs[i] / scale;
            let mut sense = problem.sense[i];
            if b < 0.0 {
                b = -b;
                coeffs.iter_mut().for_each(|c| *c = -*c);
                sense = match sense {
                    Sense::Le => Sense::Ge,
                    Sense::Ge => Sense::Le,
                    Sense::Eq => Sense::Eq,
                };
            }
            rows.push((coeffs, b, sense));
        }

        let num_slack = rows.iter().filter(|r| r.2 != Sense::Eq).count();
        let num_art = rows.iter().filter(|r| r.2 != Sense::Le).count();
        let ncols = num_struct + num_slack + num_art;
        for _ in 0..num_slack {
            kinds.push(ColKind::Slack);
        }
        for _ in 0..num_art {
            kinds.push(ColKind::Artificial);
        }

        let width = ncols + 1;
        let mut tab = vec![0.0; (m + 1) * width];
        let mut a_std = DMatrix::zeros(m, ncols);
        let mut b_std = DVector::zeros(m);
        let mut basis = vec![0; m];
        let mut next_slack = num_struct;
        let mut next_art = num_struct + num_slack;
        for (i, (coeffs, b, sense)) in rows.iter().enumerate() {
            for (j, c) in coeffs.iter().enumerate() {
                a_std[(i, j)] = *c;
            }
            match sense {
                Sense::Le => {
                    a_std[(i, next_slack)] = 1.0;
                    basis[i] = next_slack;
                    next_slack += 1;
                }
                Sense::Ge => {
                    a_std[(i, next_slack)] = -1.0;
                    next_slack += 1;
                    a_std[(i, next_art)] = 1.0;
                    basis[i] = next_art;
                    next_art += 1;
                }
                Sense::Eq => {
                    a_std[(i, next_art)] = 1.0;
                    basis[i] = next_art;
                    next_art += 1;
                }
            }
            b_std[i] = *b;
            for j in 0..ncols {
                tab[i * width + j] = a_std[(i, j)];
            }
            tab[i * width + ncols] = *b;
        }

        Self {
            m,
            ncols,
            tab,
            basis,
            kinds,
            a_std,
            b_std,
            num_orig: problem.num_vars(),
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.tab[r * (self.ncols + 1) + c]
    }

    fn is_artificial(&self, c: usize) -> bool {
        self.kinds[c] == ColKind::Artificial
    }

    fn set_objective(&mut self, cost: &[f64]) {
        let width = self.ncols + 1;
        let m = self.m;
        for c in 0..=self.ncols {
            let mut d = if c < self.ncols { cost[c] } else { 0.0 };
            for r in 0..m {
                let cb = cost[self.basis[r]];
                if cb != 0.0 {
                    d -= cb * self.tab[r * width + c];
                }
            }
            self.tab[m * width + c] = d;
        }
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let width = self.ncols + 1;
        let piv = self.tab[pr * width + pc];
        for c in 0..width {
            self.tab[pr * width + c] /= piv;
        }
        self.tab[pr * width + pc] = 1.0;
        let pivot_row: Vec<f64> = self.tab[pr * width..(pr + 1) * width].to_vec();
        for r in 0..=self.m {
            if r == pr {
                continue;
            }
            let f = self.tab[r * width + pc];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.tab[r * width..(r + 1) * width];
            for (dst, src) in row.iter_mut().zip(pivot_row.iter()) {
                *dst -= f * src;
            }
            row[pc] = 0.0;
        }
        self.basis[pr] = pc;
    }

    /// Iterate until optimal for the current objective row. Returns
    /// `Ok(true)` at optimality and `Ok(false)` on an unbounded ray.
    fn iterate(&mut self, allow_artificial: bool) -> Result<bool, ()> {
        let cap = 50 * (self.m + self.ncols) + 1000;
        let mut degenerate_run = 0usize;
        for _ in 0..cap {
            let bland = degenerate_run > BLAND_AFTER;
            let mut enter = None;
            let mut best = -COST_TOL;
            for c in 0..self.ncols {
                if !allow_artificial && self.is_artificial(c) {
                    continue;
                }
                let d = self.at(self.m, c);
                if d < best {
                    enter = Some(c);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(pc) = enter else {
                return Ok(true);
            };

            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for r in 0..self.m {
                let a = self.at(r, pc);
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.at(r, self.ncols).max(0.0) / a;
                let better = match leave {
                    None => true,
                    Some(l) => {
                        if ratio < best_ratio - 1e-12 * (1.0 + best_ratio) {
                            true
                        } else if ratio <= best_ratio + 1e-12 * (1.0 + best_ratio) {
                            if bland {
                                self.basis[r] < self.basis[l]
                            } else {
                                a > self.at(l, pc)
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    leave = Some(r);
                    best_ratio = ratio;
                }
            }
            let Some(pr) = leave else {
                return Ok(false);
            };
            if best_ratio <= 1e-14 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(pr, pc);
        }
        Err(())
    }

    fn run(mut self, cost: Option<&DVector<f64>>, feas_tol: f64) -> RunResult {
        let phase1: Vec<f64> = (0..self.ncols)
            .map(|c| if self.is_artificial(c) { 1.0 } else { 0.0 })
            .collect();
        self.set_objective(&phase1);
        if self.iterate(true).is_err() {
            return RunResult::Failed;
        }
        let infeas = -self.at(self.m, self.ncols);
        if infeas > feas_tol {
            return RunResult::Infeasible;
        }

        // Drive zero-level artificials out of the basis where possible.
        for r in 0..self.m {
            if !self.is_artificial(self.basis[r]) {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for c in 0..self.ncols {
                if self.is_artificial(c) {
                    continue;
                }
                let a = self.at(r, c).abs();
                if a > PIVOT_TOL && best.is_none_or(|(_, b)| a > b) {
                    best = Some((c, a));
                }
            }
            if let Some((c, _)) = best {
                self.pivot(r, c);
            }
        }

        if let Some(cost) = cost {
            let mut std_cost = vec![0.0; self.ncols];
            for (c, kind) in self.kinds.iter().enumerate() {
                if let ColKind::Var(j, s) = kind {
                    std_cost[c] = s * cost[*j];
                }
            }
            self.set_objective(&std_cost);
            match self.iterate(false) {
                Err(()) => return RunResult::Failed,
                Ok(false) => return RunResult::Unbounded,
                Ok(true) => {}
            }
        }

        RunResult::Solved(self.extract())
    }

    fn extract(&self) -> DVector<f64> {
        let mut std_x = vec![0.0; self.ncols];
        for r in 0..self.m {
            std_x[self.basis[r]] = self.at(r, self.ncols).max(0.0);
        }
        // Re-solve the basis against the untouched standard-form data to
        // shed accumulated pivoting error.
        let bmat = DMatrix::from_fn(self.m, self.m, |i, r| self.a_std[(i, self.basis[r])]);
        if let Some(xb) = bmat.lu().solve(&self.b_std) {
            if xb.iter().all(|v| v.is_finite() && *v >= -1e-9) {
                let mut refined = vec![0.0; self.ncols];
                for r in 0..self.m {
                    refined[self.basis[r]] = xb[r].max(0.0);
                }
                let res_old = self.std_residual(&std_x);
                let res_new = self.std_residual(&refined);
                if res_new <= res_old {
                    std_x = refined;
                }
            }
        }
        let mut x = DVector::zeros(self.num_orig);
        for (c, kind) in self.kinds.iter().enumerate() {
            if let ColKind::Var(j, s) = kind {
                x[*j] += s * std_x[c];
            }
        }
        x
    }

    fn std_residual(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let r = &self.a_std * xv - &self.b_std;
        r.amax()
    }
}
