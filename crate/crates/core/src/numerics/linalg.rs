use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// (A + Aᵀ) / 2.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// ‖A − B‖_F / ‖B‖_F (absolute when B = 0).
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn pd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = symmetrize(a).cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

/// Row-major nested vectors, for serialization.
pub fn matrix_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Factor F with FᵀF = A for symmetric PSD `A`.
///
/// For symmetric PSD matrices the singular value decomposition coincides
/// with the eigendecomposition A = U D Uᵀ; the factor is F = D^{1/2} Uᵀ with
/// singular values in decreasing order and each row's sign chosen so that
/// the diagonal of F is nonnegative. Eigenvalues in `[-1e-10‖A‖, 0)` are
/// treated as zero.
pub fn sym_psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = a.nrows();
    if p == 0 || a.ncols() != p {
        return Err(Error::Parameter(
            "sym_psd_factor needs a non-empty square matrix".into(),
        ));
    }
    let norm = a.norm();
    let asym = (a - a.transpose()).amax();
    if asym > 1e-10 * norm.max(1.0) {
        return Err(Error::Parameter(format!(
            "matrix is not symmetric (max |A - Aᵀ| = {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min < -1e-10 * norm {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let mut f = DMatrix::zeros(p, p);
    for (row, &k) in order.iter().enumerate() {
        let d = eig.eigenvalues[k].max(0.0).sqrt();
        let u = eig.eigenvectors.column(k);
        let sign = if u[row] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..p {
            f[(row, c)] = sign * d * u[c];
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_scalar() {
        let f = sym_psd_factor(&DMatrix::identity(3, 3)).unwrap();
        assert!(relative_frobenius(&(f.transpose() * &f), &DMatrix::identity(3, 3)) < 1e-14);
        let f = sym_psd_factor(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_eq!(f[(0, 0)], 2.0);
    }

    #[test]
    fn two_by_two_reconstruction() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let f = sym_psd_factor(&a).unwrap();
        assert!((f.transpose() * &f - &a).amax() < 1e-12);
        assert!(f[(0, 0)] >= 0.0 && f[(1, 1)] >= 0.0);
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(sym_psd_factor(&a), Err(Error::NotPsd { .. })));
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sym_psd_factor(&b), Err(Error::Parameter(_))));
    }

    #[test]
    fn singular_psd_is_accepted() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = sym_psd_factor(&a).unwrap();
        assert!((f.transpose() * &f - &a).amax() < 1e-14);
    }

    proptest! {
        #[test]
        fn random_psd_reconstructs(entries in proptest::collection::vec(-3.0f64..3.0, 9), rank in 1usize..=3) {
            let b = DMatrix::from_row_slice(3, 3, &entries);
            let b = b.columns(0, rank).into_owned();
            let a = &b * b.transpose();
            prop_assume!(a.norm() > 1e-6);
            let f = sym_psd_factor(&a).unwrap();
            prop_assert!(relative_frobenius(&(f.transpose() * &f), &a) < 1e-10);
        }

        #[test]
        fn pd_inverse_is_inverse(entries in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let b = DMatrix::from_row_slice(2, 2, &entries);
            let a = &b * b.transpose() + DMatrix::identity(2, 2);
            let inv = pd_inverse(&a).unwrap();
            prop_assert!((&a * inv - DMatrix::identity(2, 2)).amax() < 1e-12);
        }
    }
}
