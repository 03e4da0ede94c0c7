//! One-step Newton approximation at the ground truth for the local problems
//! `min_{Phi in O(d)} <A, Phi>` solved blockwise by the MLE and the spectral
//! estimator. Consumes the ground truth; used to check the second-order
//! theory, not to estimate anything.

use crate::error::{Error, Result};
use crate::estimators::SpectralSolution;
use crate::linalg::{frob_inner, sym_eigen, sym_sqrt, Mat};
use crate::manifold::{invert_retraction, retract, OrthogonalMatrix, TangentVector};
use crate::model::{frobenius_block_distance, BlockStack, SyncProblem};

/// Eigenvalues of `Pi_i` at or below this are treated as a regime violation.
pub const PI_FLOOR: f64 = 1e-12;

/// `H = -(A Phi0^T + Phi0 A^T) / 2`.
pub fn local_hessian(a: &Mat, phi0: &OrthogonalMatrix) -> Mat {
    let x = a * phi0.as_matrix().transpose();
    -(&x + x.transpose()) * 0.5
}

/// `<A, Phi0> + <A, V> + <H, V V^T> / 2`.
pub fn quadratic_model_value(a: &Mat, phi0: &OrthogonalMatrix, v: &TangentVector) -> f64 {
    let h = local_hessian(a, phi0);
    let vd = v.direction();
    frob_inner(a, phi0.as_matrix())
        + frob_inner(a, vd)
        + 0.5 * frob_inner(&h, &(vd * vd.transpose()))
}

/// Exact value `<A, R_{Phi0}(V)>` of the local objective after retraction.
pub fn local_objective(a: &Mat, v: &TangentVector) -> f64 {
    frob_inner(a, retract(v).as_matrix())
}

/// Newton direction for `<A, Phi>` at `phi0` and the matrix `H`.
///
/// Tangent vectors at `phi0` are `V = K phi0` with `K` skew, on which the
/// quadratic model reads `<X, K> + <H, K K^T> / 2` with `X = A phi0^T`. Its
/// minimizer solves `H K + K H = -(X - X^T)`, which is solved entrywise in
/// the eigenbasis of `H`.
pub fn newton_direction(a: &Mat, phi0: &OrthogonalMatrix) -> Result<(TangentVector, Mat)> {
    let h = local_hessian(a, phi0);
    let (values, u) = sym_eigen(&h)?;
    if !(values[0] > 0.0) {
        return Err(Error::HessianNotPd {
            lambda_min: values[0],
        });
    }
    let x = a * phi0.as_matrix().transpose();
    let rhs = -(&x - x.transpose());
    let rotated = u.transpose() * rhs * &u;
    let d = values.len();
    let k_rot = Mat::from_fn(d, d, |r, c| rotated[(r, c)] / (values[r] + values[c]));
    let k = &u * k_rot * u.transpose();
    let k = (&k - k.transpose()) * 0.5;
    let v = k * phi0.as_matrix();
    Ok((TangentVector::new_unchecked(phi0.clone(), v), h))
}

/// The textbook closed form `-H^{-1}(A + H phi0)`. Tangent only when `H` is
/// a multiple of the identity; kept for comparison with `newton_direction`.
pub fn closed_form_direction(a: &Mat, phi0: &OrthogonalMatrix) -> Result<Mat> {
    let h = local_hessian(a, phi0);
    let (values, _) = sym_eigen(&h)?;
    if !(values[0] > 0.0) {
        return Err(Error::HessianNotPd {
            lambda_min: values[0],
        });
    }
    let inv = h.clone().try_inverse().ok_or(Error::HessianNotPd {
        lambda_min: values[0],
    })?;
    Ok(-(inv * (a + &h * phi0.as_matrix())))
}

/// Per-block Newton diagnostics.
#[derive(Debug, Clone)]
pub struct NewtonEntry {
    pub block: usize,
    pub v_tilde: TangentVector,
    pub z_tilde: OrthogonalMatrix,
    pub v_hat: TangentVector,
    pub h: Mat,
    pub lambda_min_h: f64,
    pub lambda_max_h: f64,
    /// `||V_hat - V_tilde||_F`.
    pub gap_v: f64,
    /// `||V_hat - V_closed||_F` for the closed form `-H^{-1}(A + H Z_i)`.
    pub gap_v_closed_form: f64,
    /// `||Z_hat_i - Z_tilde_i||_F`.
    pub gap_z: f64,
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    /// Global rotation `Q = P(Z^T Z_hat)` removed before the analysis.
    pub alignment: OrthogonalMatrix,
    pub entries: Vec<NewtonEntry>,
    /// Blocks whose local problem had no usable Newton step.
    pub failures: Vec<(usize, Error)>,
}

impl NewtonReport {
    /// CSV with columns `i,vtilde_norm,vhat_norm,gap_V,gap_Z,lambda_min_H,lambda_max_H`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("i,vtilde_norm,vhat_norm,gap_V,gap_Z,lambda_min_H,lambda_max_H\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.block,
                e.v_tilde.norm(),
                e.v_hat.norm(),
                e.gap_v,
                e.gap_z,
                e.lambda_min_h,
                e.lambda_max_h
            ));
        }
        out
    }
}

fn entry(
    block: usize,
    a: &Mat,
    zi: &OrthogonalMatrix,
    estimate: &OrthogonalMatrix,
) -> Result<NewtonEntry> {
    let (v_tilde, h) = newton_direction(a, zi)?;
    let (values, _) = sym_eigen(&h)?;
    let z_tilde = retract(&v_tilde);
    let v_hat = invert_retraction(zi, estimate)?;
    let gap_v = (v_hat.direction() - v_tilde.direction()).norm();
    let gap_z = (estimate.as_matrix() - z_tilde.as_matrix()).norm();
    let closed = closed_form_direction(a, zi)?;
    let gap_v_closed_form = (v_hat.direction() - closed).norm();
    Ok(NewtonEntry {
        gap_v_closed_form,
        block,
        lambda_min_h: values[0],
        lambda_max_h: values[values.len() - 1],
        v_tilde,
        z_tilde,
        v_hat,
        h,
        gap_v,
        gap_z,
    })
}

fn collect_report(
    alignment: OrthogonalMatrix,
    results: impl Iterator<Item = Result<NewtonEntry>>,
) -> NewtonReport {
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.enumerate() {
        match r {
            Ok(e) => entries.push(e),
            Err(err) => failures.push((i, err)),
        }
    }
    NewtonReport {
        alignment,
        entries,
        failures,
    }
}

fn row_block(m: &Mat, i: usize, d: usize) -> Mat {
    m.view((i * d, 0), (d, d)).into_owned()
}

/// Rotates `estimate` by `Q^T`, `Q = P(Z^T estimate)`, so that the aligned
/// stack satisfies `P(Z^T S) = I`.
pub fn align_to_truth(
    estimate: &BlockStack,
    truth: &BlockStack,
) -> Result<(BlockStack, OrthogonalMatrix)> {
    let (_, q) = frobenius_block_distance(estimate, truth)?;
    Ok((estimate.rotate(&q.as_matrix().transpose()), q))
}

/// Newton step for block `i` of the MLE local problem. `z_hat` must already
/// be aligned with the truth.
pub fn mle_newton_step(problem: &SyncProblem, z_hat: &BlockStack, i: usize) -> Result<NewtonEntry> {
    let d = problem.d();
    if i >= problem.n() {
        return Err(Error::InvalidDims(format!("block {i} out of range")));
    }
    let c = problem.observation.as_matrix();
    let rows = c.rows(i * d, d);
    let a = -(rows * z_hat.as_matrix());
    let zi = problem.truth.orthogonal_block(i)?;
    let est = z_hat.orthogonal_block(i)?;
    entry(i, &a, &zi, &est)
}

/// Newton diagnostics for every block of an MLE estimate. Aligns first.
pub fn mle_newton_report(problem: &SyncProblem, z_hat: &BlockStack) -> Result<NewtonReport> {
    let (aligned, q) = align_to_truth(z_hat, &problem.truth)?;
    let d = problem.d();
    let cz = problem.observation.apply(&aligned);
    let results = (0..problem.n()).map(|i| {
        let a = -row_block(&cz, i, d);
        entry(
            i,
            &a,
            &problem.truth.orthogonal_block(i)?,
            &aligned.orthogonal_block(i)?,
        )
    });
    Ok(collect_report(q, results))
}

/// The spectral local data of block `i` with `S` aligned: `A_i Pi_i^{1/2}`,
/// where `A_i = -sum_j C_ij S_j` and `Pi_i = S_i^T S_i`.
fn spectral_local_matrix(cs: &Mat, s: &BlockStack, i: usize) -> Result<Mat> {
    let d = s.d();
    let si = s.block(i);
    let pi = si.transpose() * &si;
    let pi_half = sym_sqrt(&pi, PI_FLOOR)?;
    Ok(-row_block(cs, i, d) * pi_half)
}

/// Newton step for block `i` of the spectral local problem. `s_eig` and
/// `z_eig` must already be aligned so that `P(Z^T s_eig) = I`.
pub fn spectral_newton_step(
    problem: &SyncProblem,
    s_eig: &BlockStack,
    z_eig: &BlockStack,
    i: usize,
) -> Result<NewtonEntry> {
    let d = problem.d();
    if i >= problem.n() {
        return Err(Error::InvalidDims(format!("block {i} out of range")));
    }
    let c = problem.observation.as_matrix();
    let cs = c.rows(i * d, d) * s_eig.as_matrix();
    let si = s_eig.block(i);
    let pi_half = sym_sqrt(&(si.transpose() * &si), PI_FLOOR)?;
    let a = -cs * pi_half;
    entry(
        i,
        &a,
        &problem.truth.orthogonal_block(i)?,
        &z_eig.orthogonal_block(i)?,
    )
}

/// Newton diagnostics for every block of the spectral estimate. Aligns
/// `S` (and its rounding) by `Q = P(Z^T S)` first.
pub fn spectral_newton_report(
    problem: &SyncProblem,
    spec: &SpectralSolution,
) -> Result<NewtonReport> {
    let (s, q) = align_to_truth(&spec.s_eig, &problem.truth)?;
    let z_eig = spec.z_eig.rotate(&q.as_matrix().transpose());
    let cs = problem.observation.apply(&s);
    let results = (0..problem.n()).map(|i| {
        let a = spectral_local_matrix(&cs, &s, i)?;
        entry(
            i,
            &a,
            &problem.truth.orthogonal_block(i)?,
            &z_eig.orthogonal_block(i)?,
        )
    });
    Ok(collect_report(q, results))
}

/// Largest `||P(-A_i Pi_i^{1/2}) - P(S_i)||_F` over blocks: the minimizer of
/// the spectral local problem coincides with the rounded spectral block.
pub fn spectral_local_consistency(problem: &SyncProblem, spec: &SpectralSolution) -> Result<f64> {
    let s = &spec.s_eig;
    let cs = problem.observation.apply(s);
    let mut worst: f64 = 0.0;
    for i in 0..s.n() {
        let a = spectral_local_matrix(&cs, s, i)?;
        let p = crate::manifold::polar_retraction(&(-a))?;
        worst = worst.max((p.as_matrix() - spec.z_eig.block(i)).norm());
    }
    Ok(worst)
}
