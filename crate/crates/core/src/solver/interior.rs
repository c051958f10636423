//! Relative-interior points of `{x : A x ≤ b, E x = e}`.
//!
//! Rows of `A` that are tight on the whole set (implicit equalities) are
//! detected and reported so that barrier methods can treat them as
//! equalities instead of failing to find a strictly feasible start.

use nalgebra::{DMatrix, DVector};

use super::lp::{lp_minimize, LpFeasibilityProblem, LpSolution, Sense};
use super::SolverError;

const SLACK_ZERO: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct InteriorPoint {
    pub x: DVector<f64>,
    /// Inequality rows tight everywhere on the feasible set.
    pub implicit_equalities: Vec<usize>,
    /// Inequality rows with positive slack at `x`.
    pub strict_rows: Vec<usize>,
}

/// Returns `Ok(None)` when the set is empty.
pub fn relative_interior(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    e: &DMatrix<f64>,
    e_rhs: &DVector<f64>,
    feas_tol: f64,
) -> Result<Option<InteriorPoint>, SolverError> {
    let p = a.ncols();
    let m = a.nrows();
    let q = e.nrows();
    let mut candidates: Vec<usize> = (0..m).collect();
    let mut strict = vec![false; m];
    let mut points: Vec<DVector<f64>> = Vec::new();

    loop {
        let r = candidates.len();
        // Variables: x (free), one slack per candidate row in [0, 1].
        let nv = p + r;
        let nrows = m + r + q;
        let mut mat = DMatrix::zeros(nrows, nv);
        let mut rhs = DVector::zeros(nrows);
        let mut sense = Vec::with_capacity(nrows);
        for i in 0..m {
            mat.view_mut((i, 0), (1, p)).copy_from(&a.row(i));
            rhs[i] = b[i];
            sense.push(Sense::Le);
        }
        for (k, &i) in candidates.iter().enumerate() {
            mat[(i, p + k)] = 1.0;
            mat[(m + k, p + k)] = 1.0;
            rhs[m + k] = 1.0;
            sense.push(Sense::Le);
        }
        for i in 0..q {
            mat.view_mut((m + r + i, 0), (1, p)).copy_from(&e.row(i));
            rhs[m + r + i] = e_rhs[i];
            sense.push(Sense::Eq);
        }
        let mut nonneg = vec![false; p];
        nonneg.extend(std::iter::repeat_n(true, r));
        let lp = LpFeasibilityProblem::new(mat, rhs, sense, nonneg)?;
        let mut cost = DVector::zeros(nv);
        for k in 0..r {
            cost[p + k] = -1.0;
        }
        let (x, total) = match lp_minimize(&lp, &cost, feas_tol) {
            LpSolution::Optimal { x, objective } => (x, -objective),
            LpSolution::Infeasible => {
                if points.is_empty() {
                    return Ok(None);
                }
                return Err(SolverError::Numerical("interior search lost feasibility".into()));
            }
            LpSolution::Unbounded => {
                return Err(SolverError::Numerical("bounded interior LP reported unbounded".into()))
            }
            LpSolution::NumericalFailure => {
                return Err(SolverError::Numerical("interior LP failed".into()))
            }
        };
        let xs = x.rows(0, p).into_owned();
        if points.is_empty() || total > SLACK_ZERO {
            points.push(xs.clone());
        }
        if total <= SLACK_ZERO {
            break;
        }
        let slack = b - a * &xs;
        let mut next = Vec::new();
        for &i in &candidates {
            if slack[i] > SLACK_ZERO {
                strict[i] = true;
            } else {
                next.push(i);
            }
        }
        candidates = next;
        if candidates.is_empty() {
            break;
        }
    }

    let k = points.len() as f64;
    let x = points.iter().fold(DVector::zeros(p), |acc, v| acc + v) / k;
    let implicit_equalities: Vec<usize> = (0..m).filter(|&i| !strict[i]).collect();
    let strict_rows: Vec<usize> = (0..m).filter(|&i| strict[i]).collect();
    Ok(Some(InteriorPoint {
        x,
        implicit_equalities,
        strict_rows,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_interior_of_box() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let ip = relative_interior(&a, &b, &DMatrix::zeros(0, 2), &DVector::zeros(0), 1e-9)
            .unwrap()
            .unwrap();
        assert!(ip.implicit_equalities.is_empty());
        let s = &b - &a * &ip.x;
        assert!(s.min() > 1e-6);
    }

    #[test]
    fn detects_implicit_equality() {
        // x >= 0, x <= 0, y in [0, 1]
        let a = DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]);
        let ip = relative_interior(&a, &b, &DMatrix::zeros(0, 2), &DVector::zeros(0), 1e-9)
            .unwrap()
            .unwrap();
        assert_eq!(ip.implicit_equalities, vec![0, 1]);
        assert_eq!(ip.strict_rows, vec![2, 3]);
    }

    #[test]
    fn empty_set() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![0.0, -1.0]);
        let r = relative_interior(&a, &b, &DMatrix::zeros(0, 1), &DVector::zeros(0), 1e-9).unwrap();
        assert!(r.is_none());
    }
}
