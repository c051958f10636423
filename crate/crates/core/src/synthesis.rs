//! Fast-mixing chain synthesis on a prescribed graph with a prescribed
//! stationary distribution `v`.
//!
//! Strategies implement [`SynthesisStrategy`] and are looked up by name in a
//! [`StrategyRegistry`]:
//!
//! * `reversible`: reversible chains parametrized by edge flows
//!   `F_ij = M_ij v_j`; the mixing bound is `‖Q⁻¹MQ − rrᵀ‖₂ ≤ λ` with
//!   `r = √v`, `Q = diag(r)`.
//! * `fixed-d`: general chains with the block LMI
//!   `[[λ²P, XᵀDᵀ], [DX, D + Dᵀ − P]] ⪰ 0`, `X = M − v1ᵀ`, for a fixed `D`.
//! * `metropolis-hastings`: the closed-form baseline.
//!
//! The two LMI strategies bisect on λ ∈ [0, 1] and return the feasible
//! chain with the smallest verified mixing radius.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::markov::{check_distribution, Graph, MarkovChain, MarkovError, MatrixJson, DISTRIBUTION_TOL};
use crate::polytope::Polyhedron;
use crate::solver::interior::relative_interior;
use crate::solver::lmi::{barrier_minimize, AffineSym, BarrierOptions, BarrierStatus, LmiProgram, SymTriplets};
use crate::solver::{
    spectral_radius, symmetric_eigenvalues, AffineMatrix, SolverError, SpectralFeasibilityProblem, SpectralOutcome,
    SpectralSolver, DEFAULT_SPECTRAL_TOL,
};

pub const DEFAULT_LAMBDA_TOL: f64 = 1e-4;
/// Bound on every reported residual.
pub const RESIDUAL_TOL: f64 = 1e-7;
/// Slack allowed between the independently computed radius and the
/// reported λ.
pub const EIGEN_CHECK_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("no admissible chain exists even at lambda = 1")]
    InfeasibleAtLambdaOne,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("stationary distribution violates the safety constraints (max Gv - g = {max_slack:e})")]
    UnsafeStationary { max_slack: f64 },
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mode {
    Reversible,
    /// `D` defaults to `diag(v)⁻¹`.
    FixedD {
        #[serde(default, rename = "D", skip_serializing_if = "Option::is_none")]
        d: Option<Vec<Vec<f64>>>,
    },
    MetropolisHastings,
}

impl Mode {
    pub fn strategy_name(&self) -> &'static str {
        match self {
            Mode::Reversible => ReversibleLmi::NAME,
            Mode::FixedD { .. } => FixedDLmi::NAME,
            Mode::MetropolisHastings => MetropolisHastingsStrategy::NAME,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    None,
    MinTransitionFrequency,
    MaxSelfLoopMass,
}

/// `lower ≤ M[(row, col)] ≤ upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryBound {
    pub row: usize,
    pub col: usize,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisProblem {
    pub graph: Graph,
    pub v: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "default_lambda_tol")]
    pub lambda_tol: f64,
    #[serde(default = "default_feas_tol")]
    pub feas_tol: f64,
    #[serde(default)]
    pub bounds: Vec<EntryBound>,
}

fn default_mode() -> Mode {
    Mode::Reversible
}

fn default_lambda_tol() -> f64 {
    DEFAULT_LAMBDA_TOL
}

fn default_feas_tol() -> f64 {
    DEFAULT_SPECTRAL_TOL
}

impl SynthesisProblem {
    pub fn new(graph: Graph, v: DVector<f64>) -> Self {
        Self {
            graph,
            v: v.iter().copied().collect(),
            mode: Mode::Reversible,
            objective: Objective::None,
            lambda_tol: DEFAULT_LAMBDA_TOL,
            feas_tol: DEFAULT_SPECTRAL_TOL,
            bounds: Vec::new(),
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn v(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.v)
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        let n = self.graph.len();
        if n == 0 {
            return Err(SynthesisError::InvalidProblem("graph has no nodes".into()));
        }
        check_distribution(&self.v(), n, DISTRIBUTION_TOL)?;
        if let Some((i, x)) = self.v.iter().enumerate().find(|(_, x)| **x <= 0.0) {
            return Err(MarkovError::InvalidDistribution(format!("v[{i}] = {x} is not positive")).into());
        }
        if !self.graph.is_primitive() {
            return Err(MarkovError::GraphNotPrimitive.into());
        }
        if !(self.lambda_tol > 0.0 && self.lambda_tol < 1.0) {
            return Err(SynthesisError::InvalidProblem(format!("lambda_tol {} outside (0, 1)", self.lambda_tol)));
        }
        if !(self.feas_tol > 0.0 && self.feas_tol < 1e-2) {
            return Err(SynthesisError::InvalidProblem(format!("feas_tol {} outside (0, 1e-2)", self.feas_tol)));
        }
        for b in &self.bounds {
            if b.row >= n || b.col >= n {
                return Err(SynthesisError::InvalidProblem(format!("bound on ({}, {}) out of range", b.row, b.col)));
            }
            if let (Some(lo), Some(hi)) = (b.lower, b.upper) {
                if lo > hi {
                    return Err(SynthesisError::InvalidProblem(format!(
                        "bound on ({}, {}) has lower {lo} > upper {hi}",
                        b.row, b.col
                    )));
                }
            }
        }
        if let Mode::FixedD { d: Some(d) } = &self.mode {
            if d.len() != n || d.iter().any(|r| r.len() != n) {
                return Err(SynthesisError::InvalidProblem(format!("D must be {n}x{n}")));
            }
        }
        Ok(())
    }
}

/// Rejects `v` unless `Gv < g` holds strictly.
pub fn check_stationary_safe(safe: &Polyhedron, v: &DVector<f64>) -> Result<(), SynthesisError> {
    if safe.dim() != v.len() {
        return Err(SynthesisError::InvalidProblem("safe set and v differ in dimension".into()));
    }
    let max_slack = safe.slack(v).max();
    if safe.num_rows() > 0 && max_slack >= 0.0 {
        return Err(SynthesisError::UnsafeStationary { max_slack });
    }
    Ok(())
}

/// `Σᵢ (1 − Mᵢᵢ) vᵢ`; the self-loop mass `Σᵢ Mᵢᵢ vᵢ` is `1` minus this.
///
/// # Panics
/// If `m` is not square with side `v.len()`.
pub fn objective_transition_frequency(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    assert!(m.is_square() && m.nrows() == v.len(), "dimension mismatch");
    (0..v.len()).map(|i| (1.0 - m[(i, i)]) * v[i]).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Max of column-sum error and negative-entry magnitude.
    pub stochasticity: f64,
    /// `‖Mv − v‖∞`.
    pub stationarity: f64,
    /// Largest entry outside the graph.
    pub sparsity: f64,
    /// Largest detailed-balance violation.
    pub reversibility: f64,
}

impl Residuals {
    pub fn compute(m: &DMatrix<f64>, v: &DVector<f64>, graph: &Graph) -> Self {
        let n = v.len();
        let mut stochasticity: f64 = 0.0;
        let mut sparsity: f64 = 0.0;
        let mut reversibility: f64 = 0.0;
        for j in 0..n {
            stochasticity = stochasticity.max((m.column(j).sum() - 1.0).abs());
            for i in 0..n {
                stochasticity = stochasticity.max(-m[(i, j)]);
                if !graph.has_edge(j, i) {
                    sparsity = sparsity.max(m[(i, j)].abs());
                }
                if i < j {
                    reversibility = reversibility.max((m[(i, j)] * v[j] - m[(j, i)] * v[i]).abs());
                }
            }
        }
        let stationarity = (m * v - v).amax();
        // `+ 0.0` turns a negative zero into a positive one.
        Self { stochasticity: stochasticity + 0.0, stationarity, sparsity, reversibility }
    }

    /// Whether the structural residuals (everything but reversibility) pass.
    pub fn within(&self, tol: f64) -> bool {
        self.stochasticity <= tol && self.stationarity <= tol && self.sparsity <= tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum StepVerdict {
    Feasible { rho: f64 },
    Infeasible,
    NumericalFailure { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisectionStep {
    pub lambda: f64,
    #[serde(flatten)]
    pub verdict: StepVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub strategy: String,
    pub chain: MatrixJson,
    pub v: Vec<f64>,
    /// Upper end of the final bisection bracket.
    pub lambda_star: f64,
    /// λ at which the returned chain was computed; exceeds `lambda_star`
    /// only when an objective was re-optimized.
    pub lambda_used: f64,
    /// `ρ(M − v1ᵀ)` from an independent eigenvalue computation.
    pub rho_achieved: f64,
    pub residuals: Residuals,
    /// Metropolis–Hastings radius on the same graph, when applicable.
    pub baseline_rho: Option<f64>,
    /// False when only λ = 1 could be certified.
    pub certified: bool,
    pub objective: Objective,
    pub transition_frequency: f64,
    pub bisection: Vec<BisectionStep>,
    pub warnings: Vec<String>,
}

impl SynthesisResult {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.chain.n, self.chain.n, |i, j| self.chain.m[i][j])
    }

    pub fn chain(&self) -> Result<MarkovChain, MarkovError> {
        MarkovChain::new(self.matrix(), RESIDUAL_TOL)
    }
}

pub trait SynthesisStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn synthesize(&self, problem: &SynthesisProblem) -> Result<SynthesisResult, SynthesisError>;
}

/// Strategies keyed by name.
pub struct StrategyRegistry {
    strategies: BTreeMap<&'static str, Box<dyn SynthesisStrategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(ReversibleLmi));
        r.register(Box::new(FixedDLmi));
        r.register(Box::new(MetropolisHastingsStrategy));
        r
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self { strategies: BTreeMap::new() }
    }

    /// Replaces any strategy already registered under the same name.
    pub fn register(&mut self, s: Box<dyn SynthesisStrategy>) {
        self.strategies.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SynthesisStrategy, SynthesisError> {
        self.strategies
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| SynthesisError::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }

    /// Run the strategy named by `problem.mode`. A reversible problem that
    /// is infeasible at λ = 1 is retried with `fixed-d` and the default `D`.
    pub fn synthesize(&self, problem: &SynthesisProblem) -> Result<SynthesisResult, SynthesisError> {
        let name = problem.mode.strategy_name();
        match self.get(name)?.synthesize(problem) {
            Err(SynthesisError::InfeasibleAtLambdaOne) if problem.mode == Mode::Reversible => {
                log::warn!("no reversible chain at lambda = 1; retrying with {}", FixedDLmi::NAME);
                let fallback = problem.clone().with_mode(Mode::FixedD { d: None });
                let mut r = self.get(FixedDLmi::NAME)?.synthesize(&fallback)?;
                r.warnings
                    .insert(0, "no reversible chain exists under the constraints; used the fixed-D relaxation".into());
                Ok(r)
            }
            other => other,
        }
    }
}

/// Synthesize with the default registry.
pub fn synthesize(problem: &SynthesisProblem) -> Result<SynthesisResult, SynthesisError> {
    StrategyRegistry::default().synthesize(problem)
}

fn baseline_rho(graph: &Graph, v: &DVector<f64>) -> Option<f64> {
    let mh = MarkovChain::metropolis_hastings(graph, v).ok()?;
    Some(mh.mixing_radius(v))
}

fn mixing_radius(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let ones = DVector::from_element(v.len(), 1.0);
    spectral_radius(&(m - v * ones.transpose()))
}

/// Zero out entries that are negative only by round-off.
fn clean(mut m: DMatrix<f64>) -> DMatrix<f64> {
    m.iter_mut().for_each(|x| {
        if *x < 0.0 && *x > -1e-9 {
            *x = 0.0;
        }
    });
    m
}

struct Draft {
    m: DMatrix<f64>,
    lambda_star: f64,
    lambda_used: f64,
    bisection: Vec<BisectionStep>,
    warnings: Vec<String>,
}

fn finish(problem: &SynthesisProblem, strategy: &str, draft: Draft) -> SynthesisResult {
    let v = problem.v();
    let m = clean(draft.m);
    let rho_achieved = mixing_radius(&m, &v);
    let residuals = Residuals::compute(&m, &v, &problem.graph);
    let mut warnings = draft.warnings;
    let ergodic = MarkovChain::new(m.clone(), RESIDUAL_TOL).map(|c| c.is_ergodic()).unwrap_or(false);
    let certified = draft.lambda_star < 1.0 && ergodic;
    if !certified {
        warnings.push("result is not certified: no mixing bound below 1 was established".into());
    }
    if !residuals.within(RESIDUAL_TOL) {
        warnings.push(format!("residuals exceed {RESIDUAL_TOL:e}: {residuals:?}"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    SynthesisResult {
        strategy: strategy.to_string(),
        chain: MatrixJson::from_matrix(&m),
        v: problem.v.clone(),
        lambda_star: draft.lambda_star,
        lambda_used: draft.lambda_used,
        rho_achieved,
        residuals,
        baseline_rho: baseline_rho(&problem.graph, &v),
        certified,
        objective: problem.objective,
        transition_frequency: objective_transition_frequency(&m, &v),
        bisection: draft.bisection,
        warnings,
    }
}

fn single_state(problem: &SynthesisProblem, strategy: &str) -> SynthesisResult {
    finish(
        problem,
        strategy,
        Draft {
            m: DMatrix::from_element(1, 1, 1.0),
            lambda_star: 0.0,
            lambda_used: 0.0,
            bisection: Vec::new(),
            warnings: Vec::new(),
        },
    )
}

enum Probe<W> {
    Feasible { witness: W, rho: f64 },
    Infeasible,
    Failure(String),
}

struct Bisection<W> {
    lambda_star: f64,
    best: W,
    best_rho: f64,
    steps: Vec<BisectionStep>,
    warnings: Vec<String>,
}

/// Bisect on λ ∈ [0, 1]. A solver failure below λ = 1 counts as
/// infeasible (with a warning); at λ = 1 it is an error.
fn bisect<W>(tol: f64, mut query: impl FnMut(f64) -> Probe<W>) -> Result<Bisection<W>, SynthesisError> {
    let mut steps = Vec::new();
    let mut warnings = Vec::new();
    let (mut best, mut best_rho) = match query(1.0) {
        Probe::Feasible { witness, rho } => {
            steps.push(BisectionStep { lambda: 1.0, verdict: StepVerdict::Feasible { rho } });
            (witness, rho)
        }
        Probe::Infeasible => return Err(SynthesisError::InfeasibleAtLambdaOne),
        Probe::Failure(msg) => return Err(SynthesisError::NumericalFailure(msg)),
    };
    let mut lo = 0.0_f64;
    let mut hi = best_rho.clamp(0.0, 1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        match query(mid) {
            Probe::Feasible { witness, rho } => {
                steps.push(BisectionStep { lambda: mid, verdict: StepVerdict::Feasible { rho } });
                if rho < best_rho {
                    best = witness;
                    best_rho = rho;
                }
                hi = mid.min(rho.max(lo));
            }
            Probe::Infeasible => {
                steps.push(BisectionStep { lambda: mid, verdict: StepVerdict::Infeasible });
                lo = mid;
            }
            Probe::Failure(message) => {
                warnings.push(format!("solver failure at lambda = {mid}, treated as infeasible: {message}"));
                steps.push(BisectionStep { lambda: mid, verdict: StepVerdict::NumericalFailure { message } });
                lo = mid;
            }
        }
    }
    Ok(Bisection { lambda_star: hi, best, best_rho, steps, warnings })
}

/// Rows `A p ≤ b` encoding the entry bounds through an affine map.
fn bound_rows(map: &AffineMatrix, bounds: &[EntryBound]) -> (Vec<DVector<f64>>, Vec<f64>) {
    let p = map.coeffs.len();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for b in bounds {
        let mut a = DVector::zeros(p);
        for (k, terms) in map.coeffs.iter().enumerate() {
            for &(i, j, val) in terms {
                if i == b.row && j == b.col {
                    a[k] += val;
                }
            }
        }
        let c = map.constant[(b.row, b.col)];
        if let Some(hi) = b.upper {
            rows.push(a.clone());
            rhs.push(hi - c);
        }
        if let Some(lo) = b.lower {
            rows.push(-a);
            rhs.push(c - lo);
        }
    }
    (rows, rhs)
}

fn assemble(rows: Vec<DVector<f64>>, rhs: Vec<f64>, ncols: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(rows.len(), ncols);
    for (i, r) in rows.iter().enumerate() {
        a.view_mut((i, 0), (1, r.len())).copy_from(&r.transpose());
    }
    (a, DVector::from_vec(rhs))
}

/// Reversible chains as functions of the flows on undirected edges.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReversibleLmi;

impl ReversibleLmi {
    pub const NAME: &'static str = "reversible";

    /// Undirected edges `i < j` present in both directions.
    fn edges(graph: &Graph) -> Vec<(usize, usize)> {
        let n = graph.len();
        let mut e = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if graph.has_edge(i, j) && graph.has_edge(j, i) {
                    e.push((i, j));
                }
            }
        }
        e
    }

    pub fn spectral_problem(problem: &SynthesisProblem) -> SpectralFeasibilityProblem {
        let g = &problem.graph;
        let n = g.len();
        let v = problem.v();
        let r = v.map(f64::sqrt);
        let edges = Self::edges(g);
        let p = edges.len();

        let mut s_map = AffineSym::new(n, p);
        s_map.constant = SymTriplets::from_dense(&(DMatrix::identity(n, n) - &r * r.transpose()), 0.0);
        let mut m_coeffs = Vec::with_capacity(p);
        for (k, &(i, j)) in edges.iter().enumerate() {
            s_map.coeffs[k].add(i, j, 1.0 / (r[i] * r[j]));
            s_map.coeffs[k].add(i, i, -1.0 / v[i]);
            s_map.coeffs[k].add(j, j, -1.0 / v[j]);
            m_coeffs.push(vec![(i, j, 1.0 / v[j]), (j, i, 1.0 / v[i]), (i, i, -1.0 / v[i]), (j, j, -1.0 / v[j])]);
        }
        let m_map = AffineMatrix { constant: DMatrix::identity(n, n), coeffs: m_coeffs };

        let mut ineq_rows = Vec::new();
        let mut ineq_rhs = Vec::new();
        let mut eq_rows = Vec::new();
        let mut eq_rhs = Vec::new();
        for k in 0..p {
            let mut a = DVector::zeros(p);
            a[k] = -1.0;
            ineq_rows.push(a);
            ineq_rhs.push(0.0);
        }
        // Outflow of node j is at most v_j; exactly v_j without a self-loop.
        for node in 0..n {
            let mut a = DVector::zeros(p);
            for (k, &(i, j)) in edges.iter().enumerate() {
                if i == node || j == node {
                    a[k] = 1.0;
                }
            }
            if g.has_edge(node, node) {
                ineq_rows.push(a);
                ineq_rhs.push(v[node]);
            } else {
                eq_rows.push(a);
                eq_rhs.push(v[node]);
            }
        }
        let (br, bb) = bound_rows(&m_map, &problem.bounds);
        ineq_rows.extend(br);
        ineq_rhs.extend(bb);
        let (ineq_a, ineq_b) = assemble(ineq_rows, ineq_rhs, p);
        let (eq_a, eq_b) = assemble(eq_rows, eq_rhs, p);
        SpectralFeasibilityProblem { dim: n, nparams: p, s_map, m_map, ineq_a, ineq_b, eq_a, eq_b, lambda: 1.0 }
    }
}

impl SynthesisStrategy for ReversibleLmi {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn synthesize(&self, problem: &SynthesisProblem) -> Result<SynthesisResult, SynthesisError> {
        problem.validate()?;
        if problem.graph.len() == 1 {
            return Ok(single_state(problem, Self::NAME));
        }
        let spec = Self::spectral_problem(problem);
        if spec.nparams == 0 {
            return Err(SynthesisError::InvalidProblem("graph has no two-way edges".into()));
        }
        let solver = match SpectralSolver::new(spec, problem.feas_tol) {
            Ok(s) => s,
            Err(SolverError::Infeasible) => return Err(SynthesisError::InfeasibleAtLambdaOne),
            Err(e) => return Err(SynthesisError::NumericalFailure(e.to_string())),
        };
        let b = bisect(problem.lambda_tol, |lambda| match solver.feasible_at(lambda) {
            SpectralOutcome::Feasible { params, spectral_norm, .. } => Probe::Feasible { witness: params, rho: spectral_norm },
            SpectralOutcome::Infeasible => Probe::Infeasible,
            SpectralOutcome::NumericalFailure(msg) => Probe::Failure(msg),
        })?;
        let mut warnings = b.warnings;
        let mut params = b.best;
        let mut lambda_used = b.lambda_star.max(b.best_rho).min(1.0);
        if problem.objective != Objective::None {
            // Both objectives reduce to minimizing total flow:
            // Σ Mᵢᵢ vᵢ = 1 − 2 Σ F.
            let lambda_obj = (b.lambda_star + problem.lambda_tol).min(1.0);
            let cost = DVector::from_element(params.len(), 1.0);
            match solver.minimize_linear(lambda_obj, &cost, &params) {
                Ok(SpectralOutcome::Feasible { params: p, .. }) => {
                    params = p;
                    lambda_used = lambda_obj;
                }
                Ok(other) => warnings.push(format!("objective re-solve gave no witness ({other:?}); keeping the bisection chain")),
                Err(e) => warnings.push(format!("objective re-solve failed ({e}); keeping the bisection chain")),
            }
        }
        let m = solver.problem().m_map.eval(&params);
        Ok(finish(
            problem,
            Self::NAME,
            Draft { m, lambda_star: b.lambda_star, lambda_used, bisection: b.steps, warnings },
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FixedDOutcome {
    Feasible(DMatrix<f64>),
    Infeasible,
    NumericalFailure(String),
}

/// Block-LMI feasibility for general chains with `D` held fixed.
struct FixedDSolver {
    n: usize,
    v: DVector<f64>,
    d: DMatrix<f64>,
    graph: Graph,
    bounds: Vec<EntryBound>,
    /// `(row, col)` of `M` for each edge variable.
    slots: Vec<(usize, usize)>,
    m_map: AffineMatrix,
    /// Strict rows and equalities over the edge variables.
    a: DMatrix<f64>,
    b: DVector<f64>,
    e: DMatrix<f64>,
    e_rhs: DVector<f64>,
    m0: DVector<f64>,
    tol: f64,
}

#[derive(Clone, Debug)]
struct FixedDWitness {
    /// Edge variables followed by the upper triangle of `P`.
    x: DVector<f64>,
    s: f64,
}

impl FixedDSolver {
    fn new(graph: &Graph, v: &DVector<f64>, d: DMatrix<f64>, bounds: &[EntryBound], tol: f64) -> Result<Self, SynthesisError> {
        let n = graph.len();
        let mut slots = Vec::new();
        for col in 0..n {
            for row in 0..n {
                if graph.has_edge(col, row) {
                    slots.push((row, col));
                }
            }
        }
        let ne = slots.len();
        let m_map = AffineMatrix {
            constant: DMatrix::zeros(n, n),
            coeffs: slots.iter().map(|&(r, c)| vec![(r, c, 1.0)]).collect(),
        };
        let mut ineq_rows = Vec::new();
        let mut ineq_rhs = Vec::new();
        for k in 0..ne {
            let mut a = DVector::zeros(ne);
            a[k] = -1.0;
            ineq_rows.push(a);
            ineq_rhs.push(0.0);
        }
        let (br, bb) = bound_rows(&m_map, bounds);
        ineq_rows.extend(br);
        ineq_rhs.extend(bb);
        let mut eq_rows = Vec::new();
        let mut eq_rhs = Vec::new();
        for c in 0..n {
            let mut a = DVector::zeros(ne);
            for (k, &(_, col)) in slots.iter().enumerate() {
                if col == c {
                    a[k] = 1.0;
                }
            }
            eq_rows.push(a);
            eq_rhs.push(1.0);
        }
        // Mv = v; one row is implied by the column sums and is dropped.
        for r in 0..n.saturating_sub(1) {
            let mut a = DVector::zeros(ne);
            for (k, &(row, col)) in slots.iter().enumerate() {
                if row == r {
                    a[k] = v[col];
                }
            }
            eq_rows.push(a);
            eq_rhs.push(v[r]);
        }
        let (a_all, b_all) = assemble(ineq_rows, ineq_rhs, ne);
        let (e0, e0_rhs) = assemble(eq_rows, eq_rhs, ne);
        let ip = relative_interior(&a_all, &b_all, &e0, &e0_rhs, tol * 1e-2)
            .map_err(|e| SynthesisError::NumericalFailure(e.to_string()))?
            .ok_or(SynthesisError::InfeasibleAtLambdaOne)?;
        let a = a_all.select_rows(&ip.strict_rows);
        let b = b_all.select_rows(&ip.strict_rows);
        let mut e = DMatrix::zeros(e0.nrows() + ip.implicit_equalities.len(), ne);
        let mut e_rhs = DVector::zeros(e.nrows());
        e.rows_mut(0, e0.nrows()).copy_from(&e0);
        e_rhs.rows_mut(0, e0.nrows()).copy_from(&e0_rhs);
        for (k, &i) in ip.implicit_equalities.iter().enumerate() {
            e.row_mut(e0.nrows() + k).copy_from(&a_all.row(i));
            e_rhs[e0.nrows() + k] = b_all[i];
        }
        Ok(Self {
            n,
            v: v.clone(),
            d,
            graph: graph.clone(),
            bounds: bounds.to_vec(),
            slots,
            m_map,
            a,
            b,
            e,
            e_rhs,
            m0: ip.x,
            tol,
        })
    }

    fn np(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    fn p_index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        // Row-major upper triangle.
        a * self.n - a * (a + 1) / 2 + b
    }

    /// Block LMIs over `(edges, P[, s])`; with `s` absent the blocks must
    /// hold strictly on their own.
    fn program(&self, lambda: f64, with_s: bool) -> LmiProgram {
        let n = self.n;
        let ne = self.slots.len();
        let np = self.np();
        let nv = ne + np + usize::from(with_s);
        let mut prog = LmiProgram::new(nv);
        if with_s {
            prog.objective[nv - 1] = 1.0;
        }
        let mut big = AffineSym::new(2 * n, nv);
        let sym_d = &self.d + self.d.transpose();
        let dv = &self.d * &self.v;
        for a in 0..n {
            for b in a..n {
                big.constant.add(n + a, n + b, sym_d[(a, b)]);
            }
            for b in 0..n {
                big.constant.add(n + a, b, -dv[a]);
            }
        }
        for (k, &(row, col)) in self.slots.iter().enumerate() {
            for a in 0..n {
                big.coeffs[k].add(n + a, col, self.d[(a, row)]);
            }
        }
        let mut small = AffineSym::new(n, nv);
        for a in 0..n {
            for b in a..n {
                let k = ne + self.p_index(a, b);
                big.coeffs[k].add(a, b, lambda * lambda);
                big.coeffs[k].add(n + a, n + b, -1.0);
                small.coeffs[k].add(a, b, 1.0);
            }
        }
        if with_s {
            for i in 0..2 * n {
                big.coeffs[nv - 1].add(i, i, 1.0);
            }
            for i in 0..n {
                small.coeffs[nv - 1].add(i, i, 1.0);
            }
        }
        prog.blocks = vec![big, small];
        prog.ineq_a = DMatrix::zeros(self.a.nrows(), nv);
        prog.ineq_a.view_mut((0, 0), (self.a.nrows(), ne)).copy_from(&self.a);
        prog.ineq_b = self.b.clone();
        prog.eq_a = DMatrix::zeros(self.e.nrows(), nv);
        prog.eq_a.view_mut((0, 0), (self.e.nrows(), ne)).copy_from(&self.e);
        prog.eq_b = self.e_rhs.clone();
        prog
    }

    fn matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.m_map.eval(&x.rows(0, self.slots.len()).into_owned())
    }

    fn min_eig(block: &DMatrix<f64>) -> Result<f64, SolverError> {
        Ok(symmetric_eigenvalues(block)?[0])
    }

    fn start(&self, prog: &LmiProgram) -> Result<DVector<f64>, SolverError> {
        let ne = self.slots.len();
        let nv = prog.nvars;
        let mut x = DVector::zeros(nv);
        x.rows_mut(0, ne).copy_from(&self.m0);
        let sym_d = (&self.d + self.d.transpose()) * 0.5;
        for a in 0..self.n {
            for b in a..self.n {
                x[ne + self.p_index(a, b)] = sym_d[(a, b)];
            }
        }
        let mut worst: f64 = 0.0;
        for blk in &prog.blocks {
            worst = worst.max(-Self::min_eig(&blk.eval(&x))?);
        }
        x[nv - 1] = worst + 1.0;
        Ok(x)
    }

    fn query(&self, lambda: f64) -> Probe<FixedDWitness> {
        if lambda <= 0.0 {
            return match self.rank_one() {
                Ok(Some(m)) => {
                    let rho = mixing_radius(&m, &self.v);
                    let mut x = DVector::zeros(self.slots.len() + self.np());
                    for (k, &(r, c)) in self.slots.iter().enumerate() {
                        x[k] = m[(r, c)];
                    }
                    Probe::Feasible { witness: FixedDWitness { x, s: 0.0 }, rho }
                }
                Ok(None) => Probe::Infeasible,
                Err(e) => Probe::Failure(e.to_string()),
            };
        }
        let prog = self.program(lambda, true);
        let x0 = match self.start(&prog) {
            Ok(x) => x,
            Err(e) => return Probe::Failure(e.to_string()),
        };
        let opts = BarrierOptions {
            stop_below: Some(-1e-9),
            stop_above: Some(self.tol),
            ..BarrierOptions::default()
        };
        let r = match barrier_minimize(&prog, &x0, &opts) {
            Ok(r) => r,
            Err(e) => return Probe::Failure(e.to_string()),
        };
        let nv = prog.nvars;
        let s = r.x[nv - 1];
        if s <= self.tol {
            let x = r.x.rows(0, nv - 1).into_owned();
            let m = self.matrix(&x);
            let lin = self.linear_violation(&x);
            let rho = mixing_radius(&m, &self.v);
            if lin <= self.tol && rho <= lambda + EIGEN_CHECK_TOL {
                return Probe::Feasible { witness: FixedDWitness { x, s }, rho };
            }
            if s > 0.0 {
                return Probe::Infeasible;
            }
            return Probe::Failure(format!(
                "witness at lambda {lambda} failed re-check (radius {rho}, linear violation {lin:e})"
            ));
        }
        match r.status {
            BarrierStatus::BoundedAbove => Probe::Infeasible,
            BarrierStatus::Converged if r.lower_bound > self.tol => Probe::Infeasible,
            status => Probe::Failure(format!("no verdict at lambda {lambda} ({status:?}, s = {s:e})")),
        }
    }

    fn linear_violation(&self, x: &DVector<f64>) -> f64 {
        let xe = x.rows(0, self.slots.len()).into_owned();
        let mut worst: f64 = 0.0;
        if self.a.nrows() > 0 {
            worst = worst.max((&self.a * &xe - &self.b).max().max(0.0));
        }
        if self.e.nrows() > 0 {
            worst = worst.max((&self.e * &xe - &self.e_rhs).amax());
        }
        worst
    }

    /// At λ = 0 the only candidate is `M = v1ᵀ`; the LMI then needs
    /// `D + Dᵀ ≻ 0`.
    fn rank_one(&self) -> Result<Option<DMatrix<f64>>, SolverError> {
        let n = self.n;
        let m = &self.v * DVector::from_element(n, 1.0).transpose();
        for j in 0..n {
            for i in 0..n {
                if !self.graph.has_edge(j, i) {
                    return Ok(None);
                }
            }
        }
        for b in &self.bounds {
            let x = m[(b.row, b.col)];
            if b.lower.is_some_and(|lo| x < lo - self.tol) || b.upper.is_some_and(|hi| x > hi + self.tol) {
                return Ok(None);
            }
        }
        let sym = &self.d + self.d.transpose();
        if Self::min_eig(&sym)? <= 0.0 {
            return Ok(None);
        }
        Ok(Some(m))
    }

    /// Minimize `cost · edges` at `lambda` from a strictly feasible
    /// witness (`s < 0`).
    fn minimize_linear(&self, lambda: f64, cost: &DVector<f64>, start: &FixedDWitness) -> Result<DVector<f64>, String> {
        if start.s >= 0.0 {
            return Err("witness is not strictly feasible".into());
        }
        let mut prog = self.program(lambda, false);
        prog.objective.rows_mut(0, cost.len()).copy_from(cost);
        let opts = BarrierOptions::default();
        let r = barrier_minimize(&prog, &start.x, &opts).map_err(|e| e.to_string())?;
        let m = self.matrix(&r.x);
        let rho = mixing_radius(&m, &self.v);
        if self.linear_violation(&r.x) > self.tol || rho > lambda + EIGEN_CHECK_TOL {
            return Err(format!("objective witness failed re-check (radius {rho})"));
        }
        Ok(r.x)
    }
}

fn default_d(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&v.map(|x| 1.0 / x))
}

fn check_d(d: &DMatrix<f64>) -> Result<(), SynthesisError> {
    if d.iter().any(|x| !x.is_finite()) {
        return Err(SynthesisError::InvalidProblem("D has non-finite entries".into()));
    }
    if d.clone().lu().determinant().abs() < 1e-300 || d.clone().try_inverse().is_none() {
        return Err(SynthesisError::InvalidProblem("D is singular".into()));
    }
    Ok(())
}

/// Feasibility of the fixed-D block LMI at `lambda`. A feasible `M` has
/// passed the eigenvalue check `ρ(M − v1ᵀ) ≤ λ + 1e-6`.
pub fn fixed_d_lmi_feasible(
    graph: &Graph,
    v: &DVector<f64>,
    d: &DMatrix<f64>,
    lambda: f64,
    tol: f64,
) -> Result<FixedDOutcome, SynthesisError> {
    let n = graph.len();
    check_distribution(v, n, DISTRIBUTION_TOL)?;
    if d.nrows() != n || d.ncols() != n {
        return Err(SynthesisError::InvalidProblem(format!("D must be {n}x{n}")));
    }
    check_d(d)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SynthesisError::InvalidProblem(format!("lambda {lambda} outside [0, 1]")));
    }
    let solver = match FixedDSolver::new(graph, v, d.clone(), &[], tol) {
        Ok(s) => s,
        Err(SynthesisError::InfeasibleAtLambdaOne) => return Ok(FixedDOutcome::Infeasible),
        Err(e) => return Err(e),
    };
    Ok(match solver.query(lambda) {
        Probe::Feasible { witness, .. } => FixedDOutcome::Feasible(clean(solver.matrix(&witness.x))),
        Probe::Infeasible => FixedDOutcome::Infeasible,
        Probe::Failure(msg) => FixedDOutcome::NumericalFailure(msg),
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FixedDLmi;

impl FixedDLmi {
    pub const NAME: &'static str = "fixed-d";
}

impl SynthesisStrategy for FixedDLmi {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn synthesize(&self, problem: &SynthesisProblem) -> Result<SynthesisResult, SynthesisError> {
        problem.validate()?;
        if problem.graph.len() == 1 {
            return Ok(single_state(problem, Self::NAME));
        }
        let n = problem.graph.len();
        let v = problem.v();
        let d = match &problem.mode {
            Mode::FixedD { d: Some(d) } => DMatrix::from_fn(n, n, |i, j| d[i][j]),
            _ => default_d(&v),
        };
        check_d(&d)?;
        let solver = FixedDSolver::new(&problem.graph, &v, d, &problem.bounds, problem.feas_tol)?;
        let b = bisect(problem.lambda_tol, |lambda| solver.query(lambda))?;
        let mut warnings = b.warnings;
        let mut x = b.best.x.clone();
        let mut lambda_used = b.lambda_star.max(b.best_rho).min(1.0);
        if problem.objective != Objective::None {
            let lambda_obj = (b.lambda_star + problem.lambda_tol).min(1.0);
            // Minimize −Σ Mᵢᵢ vᵢ.
            let mut cost = DVector::zeros(solver.slots.len());
            for (k, &(r, c)) in solver.slots.iter().enumerate() {
                if r == c {
                    cost[k] = -v[r];
                }
            }
            match solver.minimize_linear(lambda_obj, &cost, &b.best) {
                Ok(xo) => {
                    x = xo;
                    lambda_used = lambda_obj;
                }
                Err(e) => warnings.push(format!("objective re-solve failed ({e}); keeping the bisection chain")),
            }
        }
        let m = solver.matrix(&x);
        Ok(finish(
            problem,
            Self::NAME,
            Draft { m, lambda_star: b.lambda_star, lambda_used, bisection: b.steps, warnings },
        ))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetropolisHastingsStrategy;

impl MetropolisHastingsStrategy {
    pub const NAME: &'static str = "metropolis-hastings";
}

impl SynthesisStrategy for MetropolisHastingsStrategy {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn synthesize(&self, problem: &SynthesisProblem) -> Result<SynthesisResult, SynthesisError> {
        problem.validate()?;
        let v = problem.v();
        let mut warnings = Vec::new();
        if problem.objective != Objective::None {
            warnings.push("objective ignored by the closed-form construction".into());
        }
        if !problem.bounds.is_empty() {
            warnings.push("entry bounds ignored by the closed-form construction".into());
        }
        let chain = MarkovChain::metropolis_hastings(&problem.graph, &v)?;
        let rho = chain.mixing_radius(&v);
        Ok(finish(
            problem,
            Self::NAME,
            Draft { m: chain.into_matrix(), lambda_star: rho, lambda_used: rho, bisection: Vec::new(), warnings },
        ))
    }
}
