//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{PfiError, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Each eigenvector is sign-normalised so that its first non-negligible entry
/// is positive, which makes the output deterministic for distinct eigenvalues.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let d = m.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vals = DVector::zeros(d);
    let mut vecs = DMatrix::zeros(d, d);
    for (k, &i) in order.iter().enumerate() {
        vals[k] = eig.eigenvalues[i];
        let mut v = eig.eigenvectors.column(i).into_owned();
        let tol = 1e-12 * v.amax();
        let first = v.iter().copied().find(|x| x.abs() > tol).unwrap_or(0.0);
        if first < 0.0 {
            v.neg_mut();
        }
        vecs.set_column(k, &v);
    }
    (vals, vecs)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn skew_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

/// Largest absolute asymmetry relative to the largest entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() / scale
}

/// Apply a scalar function to the spectrum of a symmetric matrix.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let mapped = DVector::from_iterator(vals.len(), vals.iter().map(|&v| f(v)));
    &vecs * DMatrix::from_diagonal(&mapped) * vecs.transpose()
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues within `1e-10` (relative) below zero are clamped; anything
/// more negative is an error.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, _) = sym_eigen_desc(m);
    let scale = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
    if let Some(bad) = vals.iter().find(|&&v| v < -1e-10 * scale) {
        return Err(PfiError::NotPositiveDefinite(format!(
            "eigenvalue {bad:e} in square root"
        )));
    }
    Ok(sym_apply(m, |v| v.max(0.0).sqrt()))
}

/// Cholesky factor of an SPD matrix, with a descriptive error.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrize(m))
        .map(|c| c.l())
        .ok_or_else(|| PfiError::NotPositiveDefinite("Cholesky failed".into()))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrize(m))
        .map(|c| c.inverse())
        .ok_or_else(|| PfiError::NotPositiveDefinite("inverse of non-SPD matrix".into()))
}

/// Matrix exponential.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().exp()
}

/// Spectral radius of a real square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .fold(0.0f64, |a, z| a.max(z.norm()))
}

/// Largest real part among the eigenvalues.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .fold(f64::NEG_INFINITY, |a, z| a.max(z.re))
}

/// `integral_0^t e^{A s} Q e^{A^T s} ds` via the block-exponential identity
/// of Van Loan. Valid for any `A`, including defective ones.
pub fn gramian_integral(a: &DMatrix<f64>, q: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let d = a.nrows();
    let mut block = DMatrix::zeros(2 * d, 2 * d);
    block.view_mut((0, 0), (d, d)).copy_from(&(-a * t));
    block.view_mut((0, d), (d, d)).copy_from(&(q * t));
    block.view_mut((d, d), (d, d)).copy_from(&(a.transpose() * t));
    let e = expm(&block);
    let g = e.view((0, d), (d, d)).into_owned();
    let f = e.view((d, d), (d, d)).into_owned();
    symmetrize(&(f.transpose() * g))
}

/// Frobenius inner product `tr(A^T B)`.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigen_is_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert_relative_eq!(rec, m, epsilon = 1e-12);
    }

    #[test]
    fn sqrtm_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let r = sqrtm_psd(&m).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(sqrtm_psd(&neg).is_err());
    }

    #[test]
    fn gramian_scalar_case() {
        // a = -1, q = 2: integral of 2 e^{-2s} over [0, t] = 1 - e^{-2t}
        let a = DMatrix::from_element(1, 1, -1.0);
        let q = DMatrix::from_element(1, 1, 2.0);
        let g = gramian_integral(&a, &q, 0.7);
        assert_relative_eq!(g[(0, 0)], 1.0 - (-1.4f64).exp(), epsilon = 1e-13);
    }

    #[test]
    fn gramian_defective_matrix() {
        // Jordan block: e^{As} = e^{-s} [[1, s], [0, 1]]
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        let q = DMatrix::identity(2, 2);
        let t = 1.3;
        let g = gramian_integral(&a, &q, t);
        // closed form: integral of e^{-2s} [[1 + s^2, s], [s, 1]]
        let i0 = (1.0 - (-2.0 * t).exp()) / 2.0;
        let i1 = 0.25 - (-2.0 * t).exp() * (2.0 * t + 1.0) / 4.0;
        let i2 = 0.25 - (-2.0 * t).exp() * (2.0 * t * t + 2.0 * t + 1.0) / 4.0;
        assert_relative_eq!(g[(0, 0)], i0 + i2, epsilon = 1e-12);
        assert_relative_eq!(g[(0, 1)], i1, epsilon = 1e-12);
        assert_relative_eq!(g[(1, 1)], i0, epsilon = 1e-12);
    }
}
