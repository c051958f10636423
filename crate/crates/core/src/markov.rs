//! Column-stochastic Markov chains: `M[(i, j)] = Pr(next = i | current = j)`,
//! so distributions evolve as `x⁺ = M x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::solver::spectral_radius;

/// Default tolerance on column sums.
pub const STOCHASTIC_TOL: f64 = 1e-10;
/// Entries at or below this magnitude count as structural zeros.
pub const ZERO_TOL: f64 = 1e-12;
/// Tolerance for accepting a vector as a probability distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("negative entries (row, col, value): {entries:?}")]
    NegativeEntry { entries: Vec<(usize, usize, f64)> },
    #[error("column sums differ from 1 (column, sum): {columns:?}")]
    NotStochastic { columns: Vec<(usize, f64)> },
    #[error("chain is not ergodic")]
    NotErgodic,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("adjacency entry ({row}, {col}) = {value} is not 0 or 1")]
    NotBinary { row: usize, col: usize, value: f64 },
    #[error("graph is not symmetric: edge {from}->{to} has no reverse")]
    GraphNotSymmetric { from: usize, to: usize },
    #[error("node {0} has no self-loop")]
    MissingSelfLoop(usize),
    #[error("graph violates the path-length condition (adjacency pattern not primitive)")]
    GraphNotPrimitive,
    #[error("unsupported matrix convention: {0}")]
    Convention(String),
}

/// Directed graph, `adjacency[(i, j)] = true` iff there is an edge `S_i → S_j`.
/// Serialized as a 0/1 matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct Graph {
    adjacency: Vec<Vec<bool>>,
}

impl Graph {
    pub fn from_bool(adjacency: Vec<Vec<bool>>) -> Result<Self, MarkovError> {
        let n = adjacency.len();
        if let Some(row) = adjacency.iter().find(|r| r.len() != n) {
            return Err(MarkovError::NotSquare { rows: n, cols: row.len() });
        }
        Ok(Self { adjacency })
    }

    /// From a 0/1 matrix; any other value is rejected.
    pub fn from_matrix(a: &DMatrix<f64>) -> Result<Self, MarkovError> {
        if !a.is_square() {
            return Err(MarkovError::NotSquare { rows: a.nrows(), cols: a.ncols() });
        }
        let n = a.nrows();
        let mut adjacency = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                if v == 1.0 {
                    adjacency[i][j] = true;
                } else if v != 0.0 {
                    return Err(MarkovError::NotBinary { row: i, col: j, value: v });
                }
            }
        }
        Ok(Self { adjacency })
    }

    pub fn complete(n: usize, self_loops: bool) -> Self {
        let adjacency = (0..n)
            .map(|i| (0..n).map(|j| self_loops || i != j).collect())
            .collect();
        Self { adjacency }
    }

    /// Undirected path `0 - 1 - ... - (n-1)`, optionally with self-loops.
    pub fn path(n: usize, self_loops: bool) -> Self {
        let adjacency = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (i == j && self_loops) || i.abs_diff(j) == 1)
                    .collect()
            })
            .collect();
        Self { adjacency }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from][to]
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| if self.adjacency[i][j] { 1.0 } else { 0.0 })
    }

    /// Out-degree of node `j`, self-loop included.
    pub fn degree(&self, j: usize) -> usize {
        self.adjacency[j].iter().filter(|&&e| e).count()
    }

    pub fn check_symmetric(&self) -> Result<(), MarkovError> {
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[i][j] && !self.adjacency[j][i] {
                    return Err(MarkovError::GraphNotSymmetric { from: i, to: j });
                }
            }
        }
        Ok(())
    }

    pub fn check_self_loops(&self) -> Result<(), MarkovError> {
        match (0..self.len()).find(|&i| !self.adjacency[i][i]) {
            Some(i) => Err(MarkovError::MissingSelfLoop(i)),
            None => Ok(()),
        }
    }

    /// Some path length `l` connects every ordered pair of nodes.
    pub fn is_primitive(&self) -> bool {
        // Transition support is the transpose of the adjacency; primitivity
        // is invariant under transposition.
        pattern_is_primitive(&self.adjacency)
    }
}

/// Boolean primitivity test: some power of the pattern is entrywise
/// positive. Repeated squaring reaches the Wielandt bound `n² − 2n + 2`.
pub fn pattern_is_primitive(pattern: &[Vec<bool>]) -> bool {
    let n = pattern.len();
    if n == 0 {
        return false;
    }
    if n == 1 {
        return pattern[0][0];
    }
    let wielandt = n * n - 2 * n + 2;
    let mut power = pattern.to_vec();
    let mut exponent = 1usize;
    while exponent < wielandt {
        power = bool_square(&power);
        exponent *= 2;
    }
    power.iter().all(|r| r.iter().all(|&b| b))
}

fn bool_square(a: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = a.len();
    let mut out = vec![vec![false; n]; n];
    for (row, out_row) in a.iter().zip(out.iter_mut()) {
        for (k, _) in row.iter().enumerate().filter(|(_, &b)| b) {
            for (o, &b) in out_row.iter_mut().zip(&a[k]) {
                *o |= b;
            }
        }
    }
    out
}

/// Check `x ≥ 0`, `1ᵀx = 1` within `tol`.
pub fn check_distribution(x: &DVector<f64>, n: usize, tol: f64) -> Result<(), MarkovError> {
    if x.len() != n {
        return Err(MarkovError::Dimension(format!("distribution has {} entries, expected {n}", x.len())));
    }
    if let Some((i, v)) = x.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < -tol) {
        return Err(MarkovError::InvalidDistribution(format!("entry {i} = {v}")));
    }
    let s = x.sum();
    if (s - 1.0).abs() > tol {
        return Err(MarkovError::InvalidDistribution(format!("entries sum to {s}")));
    }
    Ok(())
}

impl TryFrom<Vec<Vec<u8>>> for Graph {
    type Error = MarkovError;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self, Self::Error> {
        let mut adjacency = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let mut out = Vec::with_capacity(r.len());
            for (j, &x) in r.iter().enumerate() {
                match x {
                    0 => out.push(false),
                    1 => out.push(true),
                    _ => return Err(MarkovError::NotBinary { row: i, col: j, value: f64::from(x) }),
                }
            }
            adjacency.push(out);
        }
        Graph::from_bool(adjacency)
    }
}

impl From<Graph> for Vec<Vec<u8>> {
    fn from(g: Graph) -> Self {
        g.adjacency
            .iter()
            .map(|r| r.iter().map(|&b| u8::from(b)).collect())
            .collect()
    }
}

pub const COLUMN_STOCHASTIC: &str = "column-stochastic";
pub const ROW_STOCHASTIC: &str = "row-stochastic";

/// Wire form of a matrix: `{"n", "M" (row-major), "convention"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub n: usize,
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    pub convention: String,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            n: m.nrows(),
            m: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
            convention: COLUMN_STOCHASTIC.to_string(),
        }
    }

    /// Dense matrix in the column-stochastic convention. Row-stochastic
    /// input is transposed only when `transpose` is set.
    pub fn to_matrix(&self, transpose: bool) -> Result<DMatrix<f64>, MarkovError> {
        if self.m.len() != self.n {
            return Err(MarkovError::Dimension(format!("n = {} but M has {} rows", self.n, self.m.len())));
        }
        if let Some(r) = self.m.iter().find(|r| r.len() != self.n) {
            return Err(MarkovError::NotSquare { rows: self.n, cols: r.len() });
        }
        let dense = DMatrix::from_fn(self.n, self.n, |i, j| self.m[i][j]);
        match (self.convention.as_str(), transpose) {
            (COLUMN_STOCHASTIC, _) => Ok(dense),
            (ROW_STOCHASTIC, true) => Ok(dense.transpose()),
            (ROW_STOCHASTIC, false) => Err(MarkovError::Convention(
                "row-stochastic input must be transposed explicitly".into(),
            )),
            (other, _) => Err(MarkovError::Convention(format!("unknown convention {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationaryInfo {
    pub v: DVector<f64>,
    /// ρ(M − v1ᵀ).
    pub rho: f64,
    pub ergodic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixJson", into = "MatrixJson")]
pub struct MarkovChain {
    m: DMatrix<f64>,
}

impl MarkovChain {
    /// Validate a column-stochastic matrix.
    pub fn new(m: DMatrix<f64>, tol: f64) -> Result<Self, MarkovError> {
        if !m.is_square() {
            return Err(MarkovError::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        let n = m.nrows();
        let mut negative = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let v = m[(i, j)];
                if !v.is_finite() {
                    return Err(MarkovError::NonFinite { row: i, col: j });
                }
                if v < -ZERO_TOL {
                    negative.push((i, j, v));
                }
            }
        }
        if !negative.is_empty() {
            return Err(MarkovError::NegativeEntry { entries: negative });
        }
        let bad: Vec<(usize, f64)> = (0..n)
            .map(|j| (j, m.column(j).sum()))
            .filter(|(_, s)| (s - 1.0).abs() > tol)
            .collect();
        if !bad.is_empty() {
            return Err(MarkovError::NotStochastic { columns: bad });
        }
        Ok(Self { m })
    }

    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// `M ⊙ (11ᵀ − A_aᵀ) = 0`: `M[(j, i)]` may be nonzero only on edges `i → j`.
    pub fn respects_graph(&self, graph: &Graph) -> Result<bool, MarkovError> {
        if graph.len() != self.n() {
            return Err(MarkovError::Dimension(format!(
                "graph has {} nodes, chain has {} states",
                graph.len(),
                self.n()
            )));
        }
        let n = self.n();
        for i in 0..n {
            for j in 0..n {
                if !graph.has_edge(i, j) && self.m[(j, i)].abs() > ZERO_TOL {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    fn support(&self) -> Vec<Vec<bool>> {
        let n = self.n();
        (0..n)
            .map(|i| (0..n).map(|j| self.m[(i, j)] > ZERO_TOL).collect())
            .collect()
    }

    /// Irreducible and aperiodic, decided on the support pattern.
    pub fn is_ergodic(&self) -> bool {
        pattern_is_primitive(&self.support())
    }

    pub fn stationary(&self) -> Result<StationaryInfo, MarkovError> {
        if !self.is_ergodic() {
            return Err(MarkovError::NotErgodic);
        }
        let v = self.stationary_vector();
        let rho = self.mixing_radius(&v);
        Ok(StationaryInfo { v, rho, ergodic: true })
    }

    /// Solve `(M − I)v = 0, 1ᵀv = 1` with one row replaced by the
    /// normalization, then polish with a few refinement steps.
    fn stationary_vector(&self) -> DVector<f64> {
        let n = self.n();
        let mut a = &self.m - DMatrix::identity(n, n);
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let lu = a.clone().lu();
        let mut v = lu.solve(&rhs).unwrap_or_else(|| DVector::from_element(n, 1.0 / n as f64));
        for _ in 0..3 {
            let r = &rhs - &a * &v;
            if let Some(dv) = lu.solve(&r) {
                v += dv;
            }
        }
        v.iter_mut().for_each(|x| {
            if *x < 0.0 && *x > -1e-14 {
                *x = 0.0
            }
        });
        let s = v.sum();
        v / s
    }

    /// ρ(M − v1ᵀ).
    pub fn mixing_radius(&self, v: &DVector<f64>) -> f64 {
        let n = self.n();
        let ones = DVector::from_element(n, 1.0);
        spectral_radius(&(&self.m - v * ones.transpose()))
    }

    /// Detailed balance `M diag(v) = diag(v) Mᵀ` within `tol` (max-norm).
    pub fn is_reversible(&self, v: &DVector<f64>, tol: f64) -> Result<bool, MarkovError> {
        if v.len() != self.n() {
            return Err(MarkovError::Dimension("v length differs from state count".into()));
        }
        if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| **x <= 0.0) {
            return Err(MarkovError::InvalidDistribution(format!("v[{i}] = {x} is not positive")));
        }
        Ok(self.reversibility_residual(v) <= tol)
    }

    pub fn reversibility_residual(&self, v: &DVector<f64>) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.m[(i, j)] * v[j] - self.m[(j, i)] * v[i]).abs());
            }
        }
        worst
    }

    /// `M^k x0` by repeated multiplication.
    pub fn propagate(&self, x0: &DVector<f64>, k: usize) -> Result<DVector<f64>, MarkovError> {
        check_distribution(x0, self.n(), DISTRIBUTION_TOL)?;
        let mut x = x0.clone();
        for _ in 0..k {
            x = &self.m * x;
        }
        Ok(x)
    }

    /// Iterator over `x0, Mx0, M²x0, …` (unbounded).
    pub fn trajectory(&self, x0: &DVector<f64>) -> Result<impl Iterator<Item = DVector<f64>> + '_, MarkovError> {
        check_distribution(x0, self.n(), DISTRIBUTION_TOL)?;
        Ok(std::iter::successors(Some(x0.clone()), move |x| Some(&self.m * x)))
    }

    /// `(M + I) / 2`.
    pub fn lazy(&self) -> Self {
        let n = self.n();
        Self {
            m: (&self.m + DMatrix::identity(n, n)) * 0.5,
        }
    }

    /// Metropolis–Hastings chain with uniform proposals over out-neighbors
    /// (self included) targeting `v`. Requires a symmetric graph with all
    /// self-loops, which makes the result aperiodic.
    pub fn metropolis_hastings(graph: &Graph, v: &DVector<f64>) -> Result<Self, MarkovError> {
        let n = graph.len();
        check_distribution(v, n, DISTRIBUTION_TOL)?;
        if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| **x <= 0.0) {
            return Err(MarkovError::InvalidDistribution(format!("v[{i}] = {x} is not positive")));
        }
        graph.check_symmetric()?;
        graph.check_self_loops()?;
        if !graph.is_primitive() {
            return Err(MarkovError::GraphNotPrimitive);
        }
        let deg: Vec<f64> = (0..n).map(|j| graph.degree(j) as f64).collect();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut moved = 0.0;
            for i in 0..n {
                if i == j || !graph.has_edge(j, i) {
                    continue;
                }
                let accept = ((v[i] * deg[j]) / (v[j] * deg[i])).min(1.0);
                let p = accept / deg[j];
                m[(i, j)] = p;
                moved += p;
            }
            m[(j, j)] = 1.0 - moved;
        }
        Self::new(m, STOCHASTIC_TOL)
    }
}

impl TryFrom<MatrixJson> for MarkovChain {
    type Error = MarkovError;

    fn try_from(j: MatrixJson) -> Result<Self, Self::Error> {
        MarkovChain::new(j.to_matrix(false)?, STOCHASTIC_TOL)
    }
}

impl From<MarkovChain> for MatrixJson {
    fn from(c: MarkovChain) -> Self {
        MatrixJson::from_matrix(&c.m)
    }
}
