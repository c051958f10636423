//! Halfspace polyhedra `P(G, g) = {x : Gx ≤ g}`, optionally intersected with
//! the probability simplex, and LP-certified containment tests.
//!
//! Containment is decided by searching for a nonnegative multiplier matrix
//! `Y`. The search is row-decomposed: row `i` of `Y` is an independent LP, so
//! a failing row settles a negative verdict without solving the rest.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::solver::{lp_feasible, LpFeasibilityProblem, LpStatus, Sense, SolverError};

/// Per-row slack used by membership tests.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in halfspace data (row {0})")]
    NonFinite(usize),
    #[error("operation requires a simplex-restricted polyhedron")]
    NotOnSimplex,
    #[error("inner set is empty")]
    EmptyInner,
    #[error("inner set is unbounded")]
    UnboundedInner,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `{x : Gx ≤ g}`, intersected with Δ when `on_simplex` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolyhedronJson", into = "PolyhedronJson")]
pub struct Polyhedron {
    g_mat: DMatrix<f64>,
    g_vec: DVector<f64>,
    on_simplex: bool,
}

/// Wire form: `{"G": [[...]], "g": [...], "on_simplex": bool}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolyhedronJson {
    #[serde(rename = "G")]
    pub g_mat: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub on_simplex: bool,
}

impl TryFrom<PolyhedronJson> for Polyhedron {
    type Error = PolytopeError;

    fn try_from(j: PolyhedronJson) -> Result<Self, Self::Error> {
        let m = j.g_mat.len();
        let n = j.g_mat.first().map_or(0, |r| r.len());
        if let Some((i, r)) = j.g_mat.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(PolytopeError::Dimension(format!("row {i} of G has {} entries, expected {n}", r.len())));
        }
        let g_mat = DMatrix::from_fn(m, n, |i, k| j.g_mat[i][k]);
        Polyhedron::new(g_mat, DVector::from_vec(j.g), j.on_simplex)
    }
}

impl From<Polyhedron> for PolyhedronJson {
    fn from(p: Polyhedron) -> Self {
        Self {
            g_mat: p.g_mat.row_iter().map(|r| r.iter().copied().collect()).collect(),
            g: p.g_vec.iter().copied().collect(),
            on_simplex: p.on_simplex,
        }
    }
}

impl Polyhedron {
    pub fn new(g_mat: DMatrix<f64>, g_vec: DVector<f64>, on_simplex: bool) -> Result<Self, PolytopeError> {
        if g_mat.nrows() != g_vec.len() {
            return Err(PolytopeError::Dimension(format!(
                "G has {} rows but g has {} entries",
                g_mat.nrows(),
                g_vec.len()
            )));
        }
        for i in 0..g_mat.nrows() {
            if !g_vec[i].is_finite() || g_mat.row(i).iter().any(|v| !v.is_finite()) {
                return Err(PolytopeError::NonFinite(i));
            }
        }
        Ok(Self { g_mat, g_vec, on_simplex })
    }

    /// Δ itself, written as the single tautological row `1ᵀx ≤ 1`.
    pub fn simplex(n: usize) -> Self {
        Self {
            g_mat: DMatrix::from_element(1, n, 1.0),
            g_vec: DVector::from_element(1, 1.0),
            on_simplex: true,
        }
    }

    /// Upper bounds `x ≤ caps` on Δ.
    pub fn upper_bounds(caps: DVector<f64>) -> Result<Self, PolytopeError> {
        let n = caps.len();
        Self::new(DMatrix::identity(n, n), caps, true)
    }

    pub fn dim(&self) -> usize {
        self.g_mat.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.g_mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g_mat
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.g_vec
    }

    pub fn on_simplex(&self) -> bool {
        self.on_simplex
    }

    pub fn with_simplex(mut self, on_simplex: bool) -> Self {
        self.on_simplex = on_simplex;
        self
    }

    /// `Gx − g`.
    pub fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.g_mat * x - &self.g_vec
    }

    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        if self.on_simplex && (x.iter().any(|v| *v < -tol) || (x.sum() - 1.0).abs() > tol) {
            return false;
        }
        self.slack(x).iter().all(|s| *s <= tol)
    }

    /// `{x : A x ∈ P}` = `P(GA, g)`; the simplex flag is carried over.
    pub fn preimage(&self, a: &DMatrix<f64>) -> Result<Self, PolytopeError> {
        if a.nrows() != self.dim() || !a.is_square() {
            return Err(PolytopeError::Dimension(format!(
                "map is {}x{}, polyhedron lives in dimension {}",
                a.nrows(),
                a.ncols(),
                self.dim()
            )));
        }
        Ok(Self {
            g_mat: &self.g_mat * a,
            g_vec: self.g_vec.clone(),
            on_simplex: self.on_simplex,
        })
    }

    /// Intersection by row stacking.
    pub fn intersect(&self, other: &Self) -> Result<Self, PolytopeError> {
        if self.dim() != other.dim() {
            return Err(PolytopeError::Dimension(format!("{} vs {}", self.dim(), other.dim())));
        }
        let m = self.num_rows() + other.num_rows();
        let mut g_mat = DMatrix::zeros(m, self.dim());
        g_mat.rows_mut(0, self.num_rows()).copy_from(&self.g_mat);
        g_mat.rows_mut(self.num_rows(), other.num_rows()).copy_from(&other.g_mat);
        let mut g_vec = DVector::zeros(m);
        g_vec.rows_mut(0, self.num_rows()).copy_from(&self.g_vec);
        g_vec.rows_mut(self.num_rows(), other.num_rows()).copy_from(&other.g_vec);
        Ok(Self {
            g_mat,
            g_vec,
            on_simplex: self.on_simplex || other.on_simplex,
        })
    }

    /// `P(G − g1ᵀ, 0)`: on Δ, `Gx ≤ g ⇔ (G − g1ᵀ)x ≤ 0`.
    pub fn normalize_conical(&self) -> Result<Self, PolytopeError> {
        if !self.on_simplex {
            return Err(PolytopeError::NotOnSimplex);
        }
        Ok(Self {
            g_mat: self.conical_matrix(),
            g_vec: DVector::zeros(self.num_rows()),
            on_simplex: true,
        })
    }

    /// `G − g1ᵀ`.
    pub fn conical_matrix(&self) -> DMatrix<f64> {
        let mut c = self.g_mat.clone();
        for i in 0..c.nrows() {
            let gi = self.g_vec[i];
            c.row_mut(i).add_scalar_mut(-gi);
        }
        c
    }

    /// Rows `range` as a new polyhedron.
    pub fn rows(&self, start: usize, count: usize) -> Self {
        Self {
            g_mat: self.g_mat.rows(start, count).into_owned(),
            g_vec: self.g_vec.rows(start, count).into_owned(),
            on_simplex: self.on_simplex,
        }
    }

    fn without_row(&self, skip: usize) -> Self {
        let keep: Vec<usize> = (0..self.num_rows()).filter(|&i| i != skip).collect();
        self.select_rows(&keep)
    }

    fn select_rows(&self, keep: &[usize]) -> Self {
        Self {
            g_mat: self.g_mat.select_rows(keep),
            g_vec: self.g_vec.select_rows(keep),
            on_simplex: self.on_simplex,
        }
    }

    /// Drop every row that the remaining rows certify on Δ. Rows are
    /// visited in reverse so earlier blocks are kept preferentially.
    pub fn remove_redundant_rows(&self, feas_tol: f64) -> Result<Self, PolytopeError> {
        if !self.on_simplex {
            return Err(PolytopeError::NotOnSimplex);
        }
        let mut current = self.clone();
        let mut i = current.num_rows();
        while i > 0 {
            i -= 1;
            if current.num_rows() <= 1 {
                break;
            }
            let rest = current.without_row(i);
            let row = current.rows(i, 1);
            if let Containment::Contained(_) = contains_on_simplex(&rest, &row, feas_tol)? {
                current = rest;
            }
        }
        Ok(current)
    }
}

/// Nonnegative multiplier matrix proving a containment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainmentCertificate {
    /// Row-major `Y`, one row per outer halfspace.
    pub y: Vec<Vec<f64>>,
    pub residual: f64,
}

impl ContainmentCertificate {
    pub fn matrix(&self) -> DMatrix<f64> {
        let rows = self.y.len();
        let cols = self.y.first().map_or(0, |r| r.len());
        DMatrix::from_fn(rows, cols, |i, j| self.y[i][j])
    }

    fn from_rows(rows: Vec<DVector<f64>>, inner_rows: usize, residual: f64) -> Self {
        let y = rows
            .into_iter()
            .map(|r| {
                debug_assert_eq!(r.len(), inner_rows);
                r.iter().copied().collect()
            })
            .collect();
        Self { y, residual }
    }

    /// Max violation of `Y ≥ 0` and `Y(G − g1ᵀ) ≥ H − h1ᵀ`, computed from
    /// scratch.
    pub fn simplex_violation(&self, inner: &Polyhedron, outer: &Polyhedron) -> f64 {
        let y = self.matrix();
        if y.nrows() != outer.num_rows() || y.ncols() != inner.num_rows() {
            return f64::INFINITY;
        }
        let lhs = &y * inner.conical_matrix();
        let rhs = outer.conical_matrix();
        let mut worst = (-y.min()).max(0.0);
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            worst = worst.max(r - l);
        }
        worst
    }

    /// Max violation of `Y ≥ 0`, `YG₁ = G₂`, `Yg₁ ≤ g₂`.
    pub fn general_violation(&self, inner: &Polyhedron, outer: &Polyhedron) -> f64 {
        let y = self.matrix();
        if y.nrows() != outer.num_rows() || y.ncols() != inner.num_rows() {
            return f64::INFINITY;
        }
        let eq = (&y * inner.matrix() - outer.matrix()).amax();
        let ineq = (&y * inner.rhs() - outer.rhs()).max().max(0.0);
        (-y.min()).max(0.0).max(eq).max(ineq)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Containment {
    Contained(ContainmentCertificate),
    /// Inner set empty; holds without a multiplier certificate.
    Vacuous,
    NotContained,
    Unknown(String),
}

impl Containment {
    pub fn holds(&self) -> bool {
        matches!(self, Containment::Contained(_) | Containment::Vacuous)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Nonempty {
    Yes(DVector<f64>),
    No,
    Unknown(String),
}

/// Is `Δ ∩ P` nonempty?
pub fn nonempty_on_simplex(p: &Polyhedron, feas_tol: f64) -> Nonempty {
    let n = p.dim();
    let m = p.num_rows();
    let mut mat = DMatrix::zeros(m + 1, n);
    mat.rows_mut(0, m).copy_from(p.matrix());
    mat.row_mut(m).fill(1.0);
    let mut rhs = DVector::zeros(m + 1);
    rhs.rows_mut(0, m).copy_from(p.rhs());
    rhs[m] = 1.0;
    let mut sense = vec![Sense::Le; m];
    sense.push(Sense::Eq);
    let lp = match LpFeasibilityProblem::nonneg(mat, rhs, sense) {
        Ok(lp) => lp,
        Err(e) => return Nonempty::Unknown(e.to_string()),
    };
    let out = lp_feasible(&lp, feas_tol);
    match out.status {
        LpStatus::Feasible(x) => Nonempty::Yes(x),
        LpStatus::Infeasible => Nonempty::No,
        LpStatus::NumericalFailure => Nonempty::Unknown(format!("simplex stalled (residual {:e})", out.residual)),
    }
}

/// Outcome of a row-decomposed certificate search.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum RowSearch {
    Found(ContainmentCertificate),
    /// First outer row with no multiplier.
    Failed(usize),
    Unknown(usize, String),
}

/// Search `Y ≥ 0` with `Y C ≥ H` row by row, where `C` is the inner conical
/// matrix and `H` the outer one. No emptiness precondition is checked.
pub(crate) fn simplex_certificate(inner_conical: &DMatrix<f64>, outer_conical: &DMatrix<f64>, feas_tol: f64) -> RowSearch {
    let m1 = inner_conical.nrows();
    let n = inner_conical.ncols();
    let ct = inner_conical.transpose();
    let mut rows = Vec::with_capacity(outer_conical.nrows());
    let mut residual: f64 = 0.0;
    for i in 0..outer_conical.nrows() {
        let h = outer_conical.row(i).transpose();
        // y = 0 already works for rows that are nonpositive on Δ.
        if h.max() <= 0.0 {
            rows.push(DVector::zeros(m1));
            continue;
        }
        let lp = match LpFeasibilityProblem::nonneg(ct.clone(), h, vec![Sense::Ge; n]) {
            Ok(lp) => lp,
            Err(e) => return RowSearch::Unknown(i, e.to_string()),
        };
        let out = lp_feasible(&lp, feas_tol);
        match out.status {
            LpStatus::Feasible(y) => {
                residual = residual.max(out.residual);
                rows.push(y.map(|v| v.max(0.0)));
            }
            LpStatus::Infeasible => return RowSearch::Failed(i),
            LpStatus::NumericalFailure => return RowSearch::Unknown(i, format!("row LP residual {:e}", out.residual)),
        }
    }
    RowSearch::Found(ContainmentCertificate::from_rows(rows, m1, residual))
}

/// `Δ ∩ inner ⊆ outer`? Requires `Δ ∩ inner ≠ ∅`.
pub fn contains_on_simplex(inner: &Polyhedron, outer: &Polyhedron, feas_tol: f64) -> Result<Containment, PolytopeError> {
    if inner.dim() != outer.dim() {
        return Err(PolytopeError::Dimension(format!("{} vs {}", inner.dim(), outer.dim())));
    }
    match nonempty_on_simplex(inner, feas_tol) {
        Nonempty::Yes(_) => {}
        Nonempty::No => return Err(PolytopeError::EmptyInner),
        Nonempty::Unknown(msg) => return Ok(Containment::Unknown(msg)),
    }
    Ok(match simplex_certificate(&inner.conical_matrix(), &outer.conical_matrix(), feas_tol) {
        RowSearch::Found(mut cert) => {
            cert.residual = cert.simplex_violation(inner, outer);
            if cert.residual <= feas_tol {
                Containment::Contained(cert)
            } else {
                Containment::Unknown(format!("certificate re-check residual {:e}", cert.residual))
            }
        }
        RowSearch::Failed(_) => Containment::NotContained,
        RowSearch::Unknown(i, msg) => Containment::Unknown(format!("outer row {i}: {msg}")),
    })
}

/// Is `{x : G₁x ≤ g₁}` nonempty (no simplex restriction)?
fn nonempty_free(p: &Polyhedron, feas_tol: f64) -> Result<bool, PolytopeError> {
    let lp = LpFeasibilityProblem::new(
        p.matrix().clone(),
        p.rhs().clone(),
        vec![Sense::Le; p.num_rows()],
        vec![false; p.dim()],
    )?;
    match lp_feasible(&lp, feas_tol).status {
        LpStatus::Feasible(_) => Ok(true),
        LpStatus::Infeasible => Ok(false),
        LpStatus::NumericalFailure => Err(SolverError::Numerical("emptiness LP failed".into()).into()),
    }
}

/// Bounded iff the rows of `G₁` positively span ℝⁿ: every `±e_j` is a
/// nonnegative combination of rows.
fn is_bounded(p: &Polyhedron, feas_tol: f64) -> Result<bool, PolytopeError> {
    let n = p.dim();
    let gt = p.matrix().transpose();
    for j in 0..n {
        for sign in [1.0, -1.0] {
            let mut rhs = DVector::zeros(n);
            rhs[j] = sign;
            let lp = LpFeasibilityProblem::nonneg(gt.clone(), rhs, vec![Sense::Eq; n])?;
            match lp_feasible(&lp, feas_tol).status {
                LpStatus::Feasible(_) => {}
                LpStatus::Infeasible => return Ok(false),
                LpStatus::NumericalFailure => {
                    return Err(SolverError::Numerical("boundedness LP failed".into()).into())
                }
            }
        }
    }
    Ok(true)
}

/// `inner ⊆ outer` in ℝⁿ via `Y ≥ 0, Y G₁ = G₂, Y g₁ ≤ g₂`. An empty inner
/// set yields [`Containment::Vacuous`]; an unbounded one is rejected.
pub fn contains_general(inner: &Polyhedron, outer: &Polyhedron, feas_tol: f64) -> Result<Containment, PolytopeError> {
    if inner.dim() != outer.dim() {
        return Err(PolytopeError::Dimension(format!("{} vs {}", inner.dim(), outer.dim())));
    }
    if !nonempty_free(inner, feas_tol)? {
        return Ok(Containment::Vacuous);
    }
    if !is_bounded(inner, feas_tol)? {
        return Err(PolytopeError::UnboundedInner);
    }
    let n = inner.dim();
    let m1 = inner.num_rows();
    let mut mat = DMatrix::zeros(n + 1, m1);
    mat.rows_mut(0, n).copy_from(&inner.matrix().transpose());
    mat.row_mut(n).copy_from(&inner.rhs().transpose());
    let mut sense = vec![Sense::Eq; n];
    sense.push(Sense::Le);
    let mut rows = Vec::with_capacity(outer.num_rows());
    for i in 0..outer.num_rows() {
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&outer.matrix().row(i).transpose());
        rhs[n] = outer.rhs()[i];
        let lp = LpFeasibilityProblem::nonneg(mat.clone(), rhs, sense.clone())?;
        let out = lp_feasible(&lp, feas_tol);
        match out.status {
            LpStatus::Feasible(y) => rows.push(y.map(|v| v.max(0.0))),
            LpStatus::Infeasible => return Ok(Containment::NotContained),
            LpStatus::NumericalFailure => {
                return Ok(Containment::Unknown(format!("outer row {i}: residual {:e}", out.residual)))
            }
        }
    }
    let mut cert = ContainmentCertificate::from_rows(rows, m1, 0.0);
    cert.residual = cert.general_violation(inner, outer);
    Ok(if cert.residual <= feas_tol {
        Containment::Contained(cert)
    } else {
        Containment::Unknown(format!("certificate re-check residual {:e}", cert.residual))
    })
}
