//! Small dense helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Frobenius inner product `<A, B> = sum_ij A_ij B_ij`.
pub fn frob_inner(a: &Mat, b: &Mat) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn skew(a: &Mat) -> Mat {
    (a - a.transpose()) * 0.5
}

/// Spectral norm (largest singular value).
pub fn op_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
/// Only the lower triangle is trusted; the input is symmetrized first.
pub fn sym_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidDims(format!(
            "symmetric eigendecomposition of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if !all_finite(a) {
        return Err(Error::NonFinite);
    }
    let eig = sym(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(a.nrows(), a.ncols());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Applies `f` to the spectrum of a symmetric matrix: `U diag(f(l)) U^T`.
pub fn sym_apply(values: &[f64], vectors: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let scaled = DVector::from_iterator(values.len(), values.iter().map(|&l| f(l)));
    let mut left = vectors.clone();
    for (j, s) in scaled.iter().enumerate() {
        left.column_mut(j).scale_mut(*s);
    }
    left * vectors.transpose()
}

/// Symmetric square root of a positive definite matrix. Fails when the
/// smallest eigenvalue is at or below `floor`.
pub fn sym_sqrt(a: &Mat, floor: f64) -> Result<Mat> {
    let (values, vectors) = sym_eigen(a)?;
    if values[0] <= floor {
        return Err(Error::RankDeficient {
            ratio: values[0] / values[values.len() - 1].abs().max(f64::MIN_POSITIVE),
        });
    }
    Ok(sym_apply(&values, &vectors, f64::sqrt))
}
