//! Log-barrier interior-point method for small linear matrix inequality
//! programs:
//!
//! ```text
//! minimize    cᵀx
//! subject to  B_k(x) = B_k0 + Σ_j x_j B_kj ⪰ 0     (each block k)
//!             A x ≤ b,   E x = e
//! ```
//!
//! Coefficient matrices are stored as sparse upper-triangular triplets; the
//! symmetric structure of the chain parametrizations keeps them very sparse.
//! Equalities are removed by a null-space change of variables before the
//! Newton iterations start.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::SolverError;

/// Symmetric matrix stored as triplets `(i, j, v)` with `i <= j`; an
/// off-diagonal triplet contributes `v` at both `(i, j)` and `(j, i)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymTriplets {
    entries: Vec<(usize, usize, f64)>,
}

impl SymTriplets {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `v` to entry `(i, j)` and its mirror.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == a && e.1 == b) {
            e.2 += v;
        } else {
            self.entries.push((a, b, v));
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|&(i, j, v)| (i, j, s * v)).collect(),
        }
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn add_to(&self, target: &mut DMatrix<f64>, scale: f64) {
        for &(i, j, v) in &self.entries {
            target[(i, j)] += scale * v;
            if i != j {
                target[(j, i)] += scale * v;
            }
        }
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        self.add_to(&mut m, 1.0);
        m
    }

    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Self {
        let mut entries = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..=j {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                if v.abs() > drop_tol {
                    entries.push((i, j, v));
                }
            }
        }
        Self { entries }
    }

    /// `tr(G · self)` for a dense (not necessarily symmetric) `G`.
    fn trace_with(&self, g: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| if i == j { v * g[(i, i)] } else { v * (g[(i, j)] + g[(j, i)]) })
            .sum()
    }
}

/// Symmetric matrix-valued affine function `x ↦ B0 + Σ x_j B_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSym {
    pub dim: usize,
    pub constant: SymTriplets,
    pub coeffs: Vec<SymTriplets>,
}

impl AffineSym {
    pub fn new(dim: usize, nvars: usize) -> Self {
        Self {
            dim,
            constant: SymTriplets::new(),
            coeffs: vec![SymTriplets::new(); nvars],
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.to_dense(self.dim);
        for (j, c) in self.coeffs.iter().enumerate() {
            if x[j] != 0.0 {
                c.add_to(&mut m, x[j]);
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct LmiProgram {
    pub nvars: usize,
    pub objective: DVector<f64>,
    pub blocks: Vec<AffineSym>,
    pub ineq_a: DMatrix<f64>,
    pub ineq_b: DVector<f64>,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
}

impl LmiProgram {
    pub fn new(nvars: usize) -> Self {
        Self {
            nvars,
            objective: DVector::zeros(nvars),
            blocks: Vec::new(),
            ineq_a: DMatrix::zeros(0, nvars),
            ineq_b: DVector::zeros(0),
            eq_a: DMatrix::zeros(0, nvars),
            eq_b: DVector::zeros(0),
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.nvars;
        if self.objective.len() != n
            || self.ineq_a.ncols() != n
            || self.eq_a.ncols() != n
            || self.ineq_a.nrows() != self.ineq_b.len()
            || self.eq_a.nrows() != self.eq_b.len()
            || self.blocks.iter().any(|b| b.coeffs.len() != n)
        {
            return Err(SolverError::Dimension("inconsistent LMI program dimensions".into()));
        }
        Ok(())
    }

    /// Smallest eigenvalue over all blocks and smallest linear slack at `x`.
    pub fn margins(&self, x: &DVector<f64>) -> (f64, f64) {
        let mut eig = f64::INFINITY;
        for b in &self.blocks {
            let m = b.eval(x);
            let ev = m.symmetric_eigenvalues();
            eig = eig.min(ev.iter().copied().fold(f64::INFINITY, f64::min));
        }
        let slack = if self.ineq_b.is_empty() {
            f64::INFINITY
        } else {
            (&self.ineq_b - &self.ineq_a * x).min()
        };
        (eig, slack)
    }
}

#[derive(Clone, Debug)]
pub struct BarrierOptions {
    /// Stop once the duality-gap bound falls below this.
    pub gap_tol: f64,
    /// Stop as soon as an iterate reaches `cᵀx <= stop_below`.
    pub stop_below: Option<f64>,
    /// Stop once the lower bound on the optimum exceeds this.
    pub stop_above: Option<f64>,
    pub max_newton: usize,
    pub mu_factor: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-9,
            stop_below: None,
            stop_above: None,
            max_newton: 3000,
            mu_factor: 8.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarrierStatus {
    /// Duality gap bound below `gap_tol`.
    Converged,
    /// An iterate met `stop_below`.
    ReachedTarget,
    /// The lower bound exceeded `stop_above`.
    BoundedAbove,
    /// Line search or iteration budget exhausted before a verdict.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct BarrierResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub lower_bound: f64,
    pub status: BarrierStatus,
    pub newton_steps: usize,
}

/// Reduced problem in null-space coordinates `x = x0 + N z`.
struct Reduced {
    x0: DVector<f64>,
    basis: Option<DMatrix<f64>>,
    c: DVector<f64>,
    blocks: Vec<AffineSym>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    nz: usize,
}

impl Reduced {
    fn build(p: &LmiProgram, x0: &DVector<f64>) -> Result<Self, SolverError> {
        if p.eq_a.nrows() == 0 {
            let b = &p.ineq_b - &p.ineq_a * x0;
            let blocks = p
                .blocks
                .iter()
                .map(|blk| {
                    let mut c = AffineSym::new(blk.dim, p.nvars);
                    c.constant = SymTriplets::from_dense(&blk.eval(x0), 0.0);
                    c.coeffs = blk.coeffs.clone();
                    c
                })
                .collect();
            return Ok(Self {
                x0: x0.clone(),
                basis: None,
                c: p.objective.clone(),
                blocks,
                a: p.ineq_a.clone(),
                b,
                nz: p.nvars,
            });
        }

        let (null, x0p) = null_space_projection(&p.eq_a, &p.eq_b, x0)?;
        let nz = null.ncols();
        let c = null.transpose() * &p.objective;
        let a = &p.ineq_a * &null;
        let b = &p.ineq_b - &p.ineq_a * &x0p;
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for blk in &p.blocks {
            let dense: Vec<DMatrix<f64>> = blk.coeffs.iter().map(|c| c.to_dense(blk.dim)).collect();
            let mut red = AffineSym::new(blk.dim, nz);
            red.constant = SymTriplets::from_dense(&blk.eval(&x0p), 0.0);
            for k in 0..nz {
                let mut acc = DMatrix::zeros(blk.dim, blk.dim);
                for (j, d) in dense.iter().enumerate() {
                    let w = null[(j, k)];
                    if w != 0.0 && blk.coeffs[j].nnz() > 0 {
                        acc += d * w;
                    }
                }
                red.coeffs[k] = SymTriplets::from_dense(&acc, 1e-15);
            }
            blocks.push(red);
        }
        Ok(Self {
            x0: x0p,
            basis: Some(null),
            c,
            blocks,
            a,
            b,
            nz,
        })
    }

    fn lift(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            None => &self.x0 + z,
            Some(n) => &self.x0 + n * z,
        }
    }

    fn theta(&self) -> f64 {
        (self.blocks.iter().map(|b| b.dim).sum::<usize>() + self.a.nrows()) as f64
    }
}

/// Orthonormal null-space basis of `E` and the projection of `x0` onto
/// `{x : E x = e}`.
pub fn null_space_projection(
    e_mat: &DMatrix<f64>,
    e_rhs: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>), SolverError> {
    let n = e_mat.ncols();
    // Work with EᵀE-free SVD of Eᵀ so the right singular vectors span ℝⁿ.
    let mut padded = DMatrix::zeros(n.max(e_mat.nrows()), n);
    padded.rows_mut(0, e_mat.nrows()).copy_from(e_mat);
    let svd = padded.clone().svd(true, true);
    let v_t = svd.v_t.as_ref().ok_or(SolverError::Numerical("svd failed".into()))?;
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(1.0);
    let mut null_cols = Vec::new();
    for k in 0..v_t.nrows() {
        if svd.singular_values[k] <= tol {
            null_cols.push(v_t.row(k).transpose());
        }
    }
    let null = if null_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&null_cols)
    };
    let resid = e_mat * x0 - e_rhs;
    let mut padded_rhs = DVector::zeros(padded.nrows());
    padded_rhs.rows_mut(0, resid.len()).copy_from(&resid);
    let corr = svd
        .solve(&padded_rhs, tol)
        .map_err(|e| SolverError::Numerical(e.to_string()))?;
    let x0p = x0 - corr;
    let res_after = (e_mat * &x0p - e_rhs).amax();
    if res_after > 1e-7 * (1.0 + e_rhs.amax()) {
        return Err(SolverError::Numerical(format!(
            "equality system inconsistent (residual {res_after:e})"
        )));
    }
    Ok((null, x0p))
}

struct Evaluation {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

struct Workspace<'a> {
    red: &'a Reduced,
}

impl<'a> Workspace<'a> {
    fn slacks(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.red.b - &self.red.a * z
    }

    /// Barrier value, or `None` outside the domain.
    fn barrier(&self, z: &DVector<f64>) -> Option<f64> {
        let mut phi = 0.0;
        let s = self.slacks(z);
        for v in s.iter() {
            if *v <= 0.0 {
                return None;
            }
            phi -= v.ln();
        }
        for blk in &self.red.blocks {
            let m = blk.eval(z);
            let chol = Cholesky::new(m)?;
            let ld: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            if !ld.is_finite() {
                return None;
            }
            phi -= ld;
        }
        Some(phi)
    }

    fn evaluate(&self, z: &DVector<f64>, mu: f64) -> Option<Evaluation> {
        let nz = self.red.nz;
        let mut grad = &self.red.c * mu;
        let mut hess = DMatrix::zeros(nz, nz);
        let mut value = mu * self.red.c.dot(z);

        let s = self.slacks(z);
        for (i, &si) in s.iter().enumerate() {
            if si <= 0.0 {
                return None;
            }
            value -= si.ln();
            let row = self.red.a.row(i);
            let inv = 1.0 / si;
            for j in 0..nz {
                let aj = row[j];
                if aj == 0.0 {
                    continue;
                }
                grad[j] += aj * inv;
                for k in j..nz {
                    let ak = row[k];
                    if ak != 0.0 {
                        hess[(j, k)] += aj * ak * inv * inv;
                    }
                }
            }
        }

        for blk in &self.red.blocks {
            let n = blk.dim;
            let m = blk.eval(z);
            let chol: Cholesky<f64, Dyn> = Cholesky::new(m)?;
            let ld: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            value -= ld;
            let w = chol.inverse();
            let mut wcw: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(nz);
            for (j, cj) in blk.coeffs.iter().enumerate() {
                if cj.nnz() == 0 {
                    wcw.push(None);
                    continue;
                }
                grad[j] -= cj.trace_with(&w);
                let g = if cj.nnz() <= n {
                    let mut g = DMatrix::zeros(n, n);
                    for &(a, b, v) in cj.entries() {
                        let wa = w.column(a);
                        let wb = w.column(b);
                        // W e_a e_bᵀ W = w_a w_bᵀ (W symmetric)
                        g.ger(v, &wa, &wb, 1.0);
                        if a != b {
                            g.ger(v, &wb, &wa, 1.0);
                        }
                    }
                    g
                } else {
                    let d = cj.to_dense(n);
                    &w * d * &w
                };
                wcw.push(Some(g));
            }
            for j in 0..nz {
                let Some(g) = &wcw[j] else { continue };
                for k in j..nz {
                    let ck = &blk.coeffs[k];
                    if ck.nnz() == 0 {
                        continue;
                    }
                    hess[(j, k)] += ck.trace_with(g);
                }
            }
        }
        for j in 0..nz {
            for k in 0..j {
                hess[(j, k)] = hess[(k, j)];
            }
        }
        Some(Evaluation { value, grad, hess })
    }
}

fn solve_newton(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = hess.diagonal().amax().max(1e-300);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut h = hess.clone();
        if reg > 0.0 {
            for i in 0..h.nrows() {
                h[(i, i)] += reg;
            }
        }
        if let Some(ch) = Cholesky::new(h) {
            let dz = ch.solve(&(-grad));
            if dz.iter().all(|v| v.is_finite()) {
                return Some(dz);
            }
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    None
}

/// Run the barrier method from a strictly feasible `x0`.
pub fn barrier_minimize(
    program: &LmiProgram,
    x0: &DVector<f64>,
    opts: &BarrierOptions,
) -> Result<BarrierResult, SolverError> {
    program.validate()?;
    let red = Reduced::build(program, x0)?;
    let ws = Workspace { red: &red };
    let mut z = DVector::zeros(red.nz);
    if ws.barrier(&z).is_none() {
        return Err(SolverError::NotStrictlyFeasible);
    }

    let theta = red.theta().max(1.0);
    let mut mu = 1.0;
    let mut steps = 0usize;
    let obj_at = |z: &DVector<f64>| -> f64 { program.objective.dot(&red.lift(z)) };

    loop {
        // Centering.
        let mut centered = false;
        for _ in 0..200 {
            if steps >= opts.max_newton {
                break;
            }
            let Some(ev) = ws.evaluate(&z, mu) else {
                return Err(SolverError::Numerical("left barrier domain".into()));
            };
            let Some(dz) = solve_newton(&ev.hess, &ev.grad) else {
                break;
            };
            let dec2 = -ev.grad.dot(&dz);
            steps += 1;
            if dec2 <= 2e-10 {
                centered = true;
                break;
            }
            // Largest step keeping linear slacks positive.
            let s = ws.slacks(&z);
            let ds = &red.a * &dz;
            let mut alpha: f64 = 1.0;
            for i in 0..s.len() {
                if ds[i] > 0.0 {
                    alpha = alpha.min(0.99 * s[i] / ds[i]);
                }
            }
            let slope = ev.grad.dot(&dz);
            let mut accepted = false;
            while alpha > 1e-14 {
                let zt = &z + &dz * alpha;
                if let Some(phi) = ws.barrier(&zt) {
                    let f = mu * red.c.dot(&zt) + phi;
                    if f <= ev.value + 0.25 * alpha * slope {
                        z = zt;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Numerical floor: treat as centered if decrement is small.
                centered = dec2 <= 1e-6;
                break;
            }
            if let Some(target) = opts.stop_below {
                let obj = obj_at(&z);
                if obj <= target {
                    return Ok(BarrierResult {
                        x: red.lift(&z),
                        objective: obj,
                        lower_bound: f64::NEG_INFINITY,
                        status: BarrierStatus::ReachedTarget,
                        newton_steps: steps,
                    });
                }
            }
        }

        let objective = obj_at(&z);
        let gap = theta / mu;
        let lower_bound = objective - gap;
        let status = if !centered {
            Some(BarrierStatus::Stalled)
        } else if opts.stop_above.is_some_and(|t| lower_bound > t) {
            Some(BarrierStatus::BoundedAbove)
        } else if gap <= opts.gap_tol {
            Some(BarrierStatus::Converged)
        } else {
            None
        };
        if let Some(status) = status {
            return Ok(BarrierResult {
                x: red.lift(&z),
                objective,
                lower_bound: if centered { lower_bound } else { f64::NEG_INFINITY },
                status,
                newton_steps: steps,
            });
        }
        mu *= opts.mu_factor;
    }
}
