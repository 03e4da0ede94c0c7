//! Geometry of the orthogonal group O(d) viewed as the square Stiefel manifold.
//!
//! Points are `d x d` matrices `Q` with `Q Q^T = I`. The tangent space at `Q`
//! is `{ V : V Q^T + Q V^T = 0 }`, i.e. matrices of the form `K Q` with `K`
//! skew-symmetric. Retraction back to the manifold uses the polar factor
//! `P(Y) = (Y Y^T)^{-1/2} Y`, the nearest orthogonal matrix in Frobenius norm.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, frob_inner, op_norm, Mat};

/// Smallest-to-largest singular value ratio below which the polar factor is
/// treated as undefined.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Orthogonality tolerance `||Q^T Q - I||_F` enforced at construction.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-10;

/// Tangency tolerance `||V Q^T + Q V^T||_F`, scaled by `max(1, ||V||_F)`.
pub const TANGENCY_TOLERANCE: f64 = 1e-10;

/// A square orthogonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMatrix(Mat);

impl OrthogonalMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidDims(format!(
                "orthogonal matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if !all_finite(&m) {
            return Err(Error::NonFinite);
        }
        let deviation = orthogonality_defect(&m);
        if deviation > ORTHOGONALITY_TOLERANCE {
            return Err(Error::NotOrthogonal { deviation });
        }
        Ok(Self(m))
    }

    pub fn identity(d: usize) -> Self {
        Self(Mat::identity(d, d))
    }

    pub(crate) fn new_unchecked(m: Mat) -> Self {
        debug_assert!(orthogonality_defect(&m) <= 1e-8);
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn mul(&self, other: &OrthogonalMatrix) -> Self {
        Self(&self.0 * &other.0)
    }
}

impl AsRef<Mat> for OrthogonalMatrix {
    fn as_ref(&self) -> &Mat {
        &self.0
    }
}

/// `||Q^T Q - I||_F`.
pub fn orthogonality_defect(m: &Mat) -> f64 {
    let d = m.ncols();
    (m.transpose() * m - Mat::identity(d, d)).norm()
}

/// A direction in the tangent space of O(d) at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: OrthogonalMatrix,
    direction: Mat,
}

impl TangentVector {
    pub fn new(base: OrthogonalMatrix, direction: Mat) -> Result<Self> {
        if direction.shape() != base.as_matrix().shape() {
            return Err(Error::InvalidDims(format!(
                "tangent direction {:?} does not match base {:?}",
                direction.shape(),
                base.as_matrix().shape()
            )));
        }
        let defect = tangency_defect(base.as_matrix(), &direction);
        if defect > TANGENCY_TOLERANCE * direction.norm().max(1.0) {
            return Err(Error::InvalidDims(format!(
                "direction is not tangent (defect {defect:e})"
            )));
        }
        Ok(Self { base, direction })
    }

    pub fn zero(base: OrthogonalMatrix) -> Self {
        let d = base.dim();
        Self {
            base,
            direction: Mat::zeros(d, d),
        }
    }

    pub(crate) fn new_unchecked(base: OrthogonalMatrix, direction: Mat) -> Self {
        Self { base, direction }
    }

    pub fn base(&self) -> &OrthogonalMatrix {
        &self.base
    }

    pub fn direction(&self) -> &Mat {
        &self.direction
    }

    pub fn norm(&self) -> f64 {
        self.direction.norm()
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self {
            base: self.base.clone(),
            direction: &self.direction * t,
        }
    }

    /// `||V Q^T + Q V^T||_F`; zero for an exact tangent vector.
    pub fn tangency_defect(&self) -> f64 {
        tangency_defect(self.base.as_matrix(), &self.direction)
    }
}

pub fn tangency_defect(base: &Mat, v: &Mat) -> f64 {
    let m = v * base.transpose();
    (&m + m.transpose()).norm()
}

/// Nearest orthogonal matrix to `y`, the polar factor `(Y Y^T)^{-1/2} Y`.
///
/// Singular values from an SVD decide the rank check. The factor itself
/// comes from the scaled Newton iteration `X <- (g X + (g X)^{-T}) / 2`,
/// since the SVD's singular vectors lose accuracy when the singular values
/// cluster, which is the common case near the manifold.
pub fn polar_retraction(y: &Mat) -> Result<OrthogonalMatrix> {
    if y.nrows() != y.ncols() || y.nrows() == 0 {
        return Err(Error::InvalidDims(format!(
            "polar retraction needs a square matrix, got {}x{}",
            y.nrows(),
            y.ncols()
        )));
    }
    if !all_finite(y) {
        return Err(Error::NonFinite);
    }
    let s = y.singular_values();
    let (smax, smin) = (s.max(), s.min());
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(ratio > RANK_TOLERANCE) {
        return Err(Error::RankDeficient { ratio });
    }
    let mut x = y / smax;
    for _ in 0..100 {
        let inv_t = match x.clone().try_inverse() {
            Some(inv) => inv.transpose(),
            None => return Err(Error::RankDeficient { ratio }),
        };
        let change = (&x - &inv_t).norm();
        let g = if change > 1e-2 {
            (inv_t.norm() / x.norm()).sqrt()
        } else {
            1.0
        };
        let next = (&x * g + inv_t / g) * 0.5;
        let step = (&next - &x).norm();
        x = next;
        if step <= 1e-14 * (x.nrows() as f64).sqrt() || change <= 1e-15 {
            break;
        }
    }
    // One last unscaled step polishes rounding from the loop exit.
    if let Some(inv) = x.clone().try_inverse() {
        x = (&x + inv.transpose()) * 0.5;
    }
    Ok(OrthogonalMatrix::new_unchecked(x))
}

/// Orthogonal projection onto the tangent space at `base`:
/// `Y - (Q Y^T + Y Q^T) Q / 2`.
pub fn tangent_project(base: &OrthogonalMatrix, y: &Mat) -> TangentVector {
    let q = base.as_matrix();
    let s = (q * y.transpose() + y * q.transpose()) * 0.5;
    TangentVector::new_unchecked(base.clone(), y - s * q)
}

/// Riemannian gradient of `Phi -> <A, Phi>` at `phi`.
pub fn riemannian_gradient(a: &Mat, phi: &OrthogonalMatrix) -> TangentVector {
    tangent_project(phi, a)
}

/// Quadratic form of the Riemannian Hessian of `Phi -> <A, Phi>` at `phi`,
/// evaluated on `v`: `-<A Phi^T + Phi A^T, V V^T> / 2`.
pub fn riemannian_hessian_form(a: &Mat, phi: &OrthogonalMatrix, v: &TangentVector) -> f64 {
    let q = phi.as_matrix();
    let s = a * q.transpose() + q * a.transpose();
    let vd = v.direction();
    -0.5 * frob_inner(&s, &(vd * vd.transpose()))
}

/// Polar retraction at `v.base()`: `P(Q + V) = (I + V V^T)^{-1/2} (Q + V)`.
pub fn retract(v: &TangentVector) -> OrthogonalMatrix {
    let y = v.base().as_matrix() + v.direction();
    // Q + V has all singular values >= 1 when V is tangent.
    polar_retraction(&y).expect("Q + V is full rank for tangent V")
}

/// Third-order expansion `Q + tV - t^2/2 V V^T Q - t^3/2 V V^T V` of `retract(t V)`.
pub fn retraction_cubic_expansion(v: &TangentVector, t: f64) -> Mat {
    let q = v.base().as_matrix();
    let vd = v.direction();
    let vvt = vd * vd.transpose();
    q + vd * t - &vvt * q * (0.5 * t * t) - &vvt * vd * (0.5 * t * t * t)
}

/// Inverse of the polar retraction at `base`: the tangent `V` with
/// `P(base + V) = target`.
///
/// Writes `base + V = S target` with `S` symmetric positive definite and
/// solves the Sylvester equation `S M + M^T S = 2I`, `M = target base^T`,
/// through its `d^2 x d^2` Kronecker form.
pub fn invert_retraction(
    base: &OrthogonalMatrix,
    target: &OrthogonalMatrix,
) -> Result<TangentVector> {
    let q0 = base.as_matrix();
    let q = target.as_matrix();
    if q0.shape() != q.shape() {
        return Err(Error::InvalidDims("base and target differ in size".into()));
    }
    let distance = op_norm(&(q - q0));
    if !(distance < 1.0) {
        return Err(Error::NotInDomain { distance });
    }
    let d = q0.nrows();
    let m = q * q0.transpose();
    let mt = m.transpose();
    // Column-major vec: vec(S M) = (M^T kron I) vec(S), vec(M^T S) = (I kron M^T) vec(S).
    let n2 = d * d;
    let mut system = Mat::zeros(n2, n2);
    for col_s in 0..d {
        for row_s in 0..d {
            let k = row_s + col_s * d;
            // Contribution of S[row_s, col_s] to (S M)[r, c] = sum_j S[r, j] M[j, c].
            for c in 0..d {
                system[(row_s + c * d, k)] += m[(col_s, c)];
            }
            // Contribution to (M^T S)[r, c] = sum_j M^T[r, j] S[j, c].
            for r in 0..d {
                system[(r + col_s * d, k)] += mt[(r, row_s)];
            }
        }
    }
    let rhs = DVector::from_iterator(n2, (0..n2).map(|k| if k % d == k / d { 2.0 } else { 0.0 }));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::NotInDomain { distance })?;
    let s = Mat::from_column_slice(d, d, sol.as_slice());
    let s = (&s + s.transpose()) * 0.5;
    let v = s * q - q0;
    Ok(TangentVector::new_unchecked(base.clone(), v))
}
