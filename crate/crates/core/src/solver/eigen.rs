use nalgebra::{DMatrix, DVector};

use super::SolverError;

/// Relative asymmetry tolerated by [`symmetric_eigenvalues`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues of a symmetric matrix in nondecreasing order.
pub fn symmetric_eigenvalues(s: &DMatrix<f64>) -> Result<DVector<f64>, SolverError> {
    if !s.is_square() {
        return Err(SolverError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite);
    }
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let asym = (s - s.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(SolverError::NotSymmetric { asymmetry: asym / scale });
    }
    if s.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let sym = (s + s.transpose()) * 0.5;
    let mut values: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| a.total_cmp(b));
    Ok(DVector::from_vec(values))
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn symmetric_spectral_norm(s: &DMatrix<f64>) -> Result<f64, SolverError> {
    let ev = symmetric_eigenvalues(s)?;
    Ok(ev.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

/// Spectral radius of a general real square matrix.
///
/// Dense Schur decomposition up to `dense_limit` states, power iteration
/// beyond that.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    const DENSE_LIMIT: usize = 500;
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    if n <= DENSE_LIMIT {
        if let Some(schur) = a.clone().try_schur(1e-14, 10_000) {
            return schur
                .complex_eigenvalues()
                .iter()
                .fold(0.0f64, |m, z| m.max(z.norm()));
        }
    }
    power_iteration_radius(a, 20_000, 1e-13)
}

/// Estimate ρ(A) as the geometric growth rate of ‖Aᵏx‖ from a fixed start.
pub fn power_iteration_radius(a: &DMatrix<f64>, max_iter: usize, tol: f64) -> f64 {
    let n = a.nrows();
    // Deterministic, non-symmetric start vector.
    let mut x = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
    let norm = x.norm();
    x /= norm;
    // Average growth over two steps handles a real pair ±ρ that makes
    // single-step ratios oscillate.
    let mut prev = f64::NAN;
    for _ in 0..max_iter {
        let y = a * &x;
        let z = a * &y;
        let nz = z.norm();
        if nz == 0.0 {
            return 0.0;
        }
        let est = nz.sqrt();
        x = z / nz;
        if (est - prev).abs() <= tol * est.max(1e-300) {
            return est;
        }
        prev = est;
    }
    prev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_exchange() {
        let id = DMatrix::<f64>::identity(2, 2);
        assert_eq!(symmetric_eigenvalues(&id).unwrap().as_slice(), &[1.0, 1.0]);
        let ex = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let ev = symmetric_eigenvalues(&ex).unwrap();
        assert!((ev[0] + 1.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        assert!(matches!(symmetric_eigenvalues(&a), Err(SolverError::NotSymmetric { .. })));
    }

    #[test]
    fn radius_of_rotation_and_power_fallback() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
        let b = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, -0.7, 0.2, 0.0, 0.0, 0.3]);
        assert!((power_iteration_radius(&b, 100_000, 1e-14) - 0.7).abs() < 1e-8);
    }
}
