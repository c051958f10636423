//! Small reference instances used by tests, the CLI, and the docs.

use nalgebra::{DMatrix, DVector};

use crate::polytope::Polyhedron;

/// Three-state chain whose maximal invariant set under the box
/// [`example_safe_set`] is determined after one iteration.
pub fn example_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.8, 0.2, 0.0, 0.2, 0.2, 0.9, 0.0, 0.6, 0.1])
}

/// Upper bounds `x ≤ [0.6, 0.5, 0.5]` on the simplex.
pub fn example_safe_set() -> Polyhedron {
    Polyhedron::new(
        DMatrix::identity(3, 3),
        DVector::from_vec(vec![0.6, 0.5, 0.5]),
        true,
    )
    .expect("well-formed")
}

/// Stationary distribution of [`example_matrix`].
pub fn example_stationary() -> DVector<f64> {
    DVector::from_vec(vec![0.375, 0.375, 0.25])
}
