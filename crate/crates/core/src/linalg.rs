//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{shape_err, Error, Result};

pub type SpdFactor = Cholesky<f64, Dyn>;

/// Cholesky factor of a symmetric positive definite matrix.
pub fn spd_factor(m: &DMatrix<f64>, what: &str) -> Result<SpdFactor> {
    if !m.is_square() {
        return Err(shape_err!("{what} must be square, got {:?}", m.shape()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::Domain(format!("{what} is not positive definite")))
}

pub fn log_det(factor: &SpdFactor) -> f64 {
    2.0 * factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn solve_vec(factor: &SpdFactor, b: &DVector<f64>) -> DVector<f64> {
    factor.solve(b)
}

/// `m + shift * I`.
pub fn shifted(m: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += shift;
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn require_symmetric(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(shape_err!("{what} must be square, got {:?}", m.shape()));
    }
    let scale = m.amax().max(1.0);
    if max_asymmetry(m) > tol * scale {
        return Err(Error::Domain(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// Eigenvalues and eigenvectors sorted by descending eigenvalue.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigendecomposition of a non-finite matrix".into()));
    }
    let eig = nalgebra::SymmetricEigen::try_new(symmetrize(m), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 0.5]));
        let f = spd_factor(&m, "m").unwrap();
        assert!((log_det(&f) - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn indefinite_is_domain_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_factor(&m, "m"), Err(Error::Domain(_))));
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m).unwrap();
        assert_eq!(vals, vec![4.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }
}
