//! Iterative symmetric eigensolvers for the few extreme eigenpairs of a dense
//! matrix: block subspace iteration with Rayleigh-Ritz for the top `k` pairs,
//! and Lanczos with full reorthogonalization for a single extreme eigenvalue,
//! optionally restricted to the orthogonal complement of a known subspace.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, sym_eigen, Mat, Vector};
use crate::model::rng_for;

/// Relative residual tolerance for converged Ritz pairs.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;
/// Iteration cap for subspace iteration.
pub const MAX_ITERATIONS: usize = 5000;
/// Relative residual tolerance for Lanczos extreme eigenvalues.
pub const LANCZOS_TOLERANCE: f64 = 1e-8;
/// Lanczos step cap.
pub const LANCZOS_MAX_STEPS: usize = 1000;

const START_SEED: u64 = 0x5e_ed0f_e16e;

/// Leading eigenpairs sorted by decreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Mat,
    pub iterations: usize,
    /// Largest `||M v - lambda v||` over the returned pairs.
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Largest,
    Smallest,
}

fn check_square(m: &Mat) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidDims(format!(
            "eigensolver needs a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !all_finite(m) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

fn orthonormalize(y: Mat) -> Mat {
    y.qr().q()
}

fn gaussian_block(rows: usize, cols: usize, stream: u64) -> Mat {
    let mut rng = rng_for(START_SEED, stream);
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Top `k` eigenpairs of the symmetric matrix `m`.
///
/// Runs shifted block subspace iteration on a block of
/// `min(N, k + max(k, 8))` vectors, with a Rayleigh-Ritz step every
/// iteration. The shift keeps the unwanted part of the spectrum centred
/// around zero so that large negative eigenvalues cannot crowd the block.
pub fn top_eigenpairs(m: &Mat, k: usize) -> Result<EigenPairs> {
    check_square(m)?;
    let n = m.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidDims(format!(
            "cannot take {k} eigenpairs of a {n}x{n} matrix"
        )));
    }
    let b = n.min(k + k.max(8));
    if b == n {
        return dense_top(m, k);
    }

    // Loose estimate of the bottom of the spectrum, pushed down by a margin
    // so that it is a safe lower bound.
    let bottom = extreme_eigenvalue_with(m, None, Extreme::Smallest, 1e-4, 200)?;
    let mut x = orthonormalize(gaussian_block(n, b, 1));
    let mut mx = m * &x;
    let mut ritz = vec![0.0; b];
    let mut last_residual = f64::INFINITY;
    for iter in 1..=MAX_ITERATIONS {
        // Rayleigh-Ritz on span(x).
        let h = x.transpose() * &mx;
        let (values, u) = sym_eigen(&h)?;
        // Descending order.
        let order: Vec<usize> = (0..b).rev().collect();
        let u = Mat::from_fn(b, b, |r, c| u[(r, order[c])]);
        for (c, &o) in order.iter().enumerate() {
            ritz[c] = values[o];
        }
        x = &x * &u;
        mx = &mx * &u;

        let scale = ritz
            .iter()
            .fold(bottom.abs(), |acc, v| acc.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let mut max_res: f64 = 0.0;
        for j in 0..k {
            let r = mx.column(j) - x.column(j) * ritz[j];
            max_res = max_res.max(r.norm());
        }
        last_residual = max_res;
        if max_res <= RESIDUAL_TOLERANCE * scale {
            return Ok(EigenPairs {
                values: ritz[..k].to_vec(),
                vectors: x.columns(0, k).into_owned(),
                iterations: iter,
                max_residual: max_res,
            });
        }

        let shift = 0.5 * (bottom + ritz[b - 1]);
        let y = &mx - &x * shift;
        x = orthonormalize(y);
        mx = m * &x;
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        residual: last_residual,
    })
}

fn dense_top(m: &Mat, k: usize) -> Result<EigenPairs> {
    let n = m.nrows();
    let (values, vectors) = sym_eigen(m)?;
    let mut out_vals = Vec::with_capacity(k);
    let mut out_vecs = Mat::zeros(n, k);
    for j in 0..k {
        let src = n - 1 - j;
        out_vals.push(values[src]);
        out_vecs.set_column(j, &vectors.column(src));
    }
    let residual = (0..k)
        .map(|j| (m * out_vecs.column(j) - out_vecs.column(j) * out_vals[j]).norm())
        .fold(0.0, f64::max);
    Ok(EigenPairs {
        values: out_vals,
        vectors: out_vecs,
        iterations: 1,
        max_residual: residual,
    })
}

/// Largest or smallest eigenvalue of `m` restricted to the orthogonal
/// complement of the columns of `deflate` (assumed orthonormal).
///
/// When `deflate` spans an invariant subspace this is exactly the next
/// eigenvalue past that subspace; otherwise, by Courant-Fischer, the
/// smallest deflated value is a lower bound of `lambda_{k+1}` counted from
/// the bottom and the largest is an upper bound of `lambda_{k+1}` counted
/// from the top.
pub fn extreme_eigenvalue(m: &Mat, deflate: Option<&Mat>, which: Extreme) -> Result<f64> {
    extreme_eigenvalue_with(m, deflate, which, LANCZOS_TOLERANCE, LANCZOS_MAX_STEPS)
}

fn project_out(v: &mut Vector, basis: Option<&Mat>) {
    if let Some(u) = basis {
        let coeffs = u.transpose() * &*v;
        *v -= u * coeffs;
    }
}

fn extreme_eigenvalue_with(
    m: &Mat,
    deflate: Option<&Mat>,
    which: Extreme,
    tol: f64,
    max_steps: usize,
) -> Result<f64> {
    check_square(m)?;
    let n = m.nrows();
    let removed = deflate.map_or(0, |u| u.ncols());
    if let Some(u) = deflate {
        if u.nrows() != n {
            return Err(Error::InvalidDims(
                "deflation basis has the wrong length".into(),
            ));
        }
    }
    if removed >= n {
        return Err(Error::InvalidDims(
            "deflation removes the whole space".into(),
        ));
    }
    let dim = n - removed;
    let steps_cap = dim.min(max_steps);
    let sign = match which {
        Extreme::Largest => 1.0,
        Extreme::Smallest => -1.0,
    };

    let mut v = gaussian_block(n, 1, 2).column(0).into_owned();
    project_out(&mut v, deflate);
    // Second projection pass for numerical orthogonality.
    project_out(&mut v, deflate);
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: f64::INFINITY,
        });
    }
    v /= norm;

    let mut basis: Vec<Vector> = Vec::with_capacity(steps_cap + 1);
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut norm_est: f64 = 0.0;
    let mut last = (f64::NAN, f64::INFINITY);

    basis.push(v);
    for step in 1..=steps_cap {
        let q = &basis[step - 1];
        let mut w: Vector = m * q;
        project_out(&mut w, deflate);
        let a = q.dot(&w);
        alpha.push(a);
        // Full reorthogonalization, applied twice.
        for _ in 0..2 {
            for p in &basis {
                let c = p.dot(&w);
                w.axpy(-c, p, 1.0);
            }
            project_out(&mut w, deflate);
        }
        let b = w.norm();
        norm_est = norm_est.max(a.abs() + b + beta.last().copied().unwrap_or(0.0));

        let breakdown = b <= 1e-13 * norm_est.max(f64::MIN_POSITIVE);
        let check = breakdown || step == steps_cap || step < 20 || step % 10 == 0;
        if check {
            let (theta, res) = tridiagonal_extreme(&alpha, &beta, b, sign)?;
            last = (theta, res);
            if breakdown || res <= tol * norm_est.max(f64::MIN_POSITIVE) {
                return Ok(theta);
            }
        }
        if step == steps_cap {
            break;
        }
        beta.push(b);
        basis.push(w / b);
    }
    if steps_cap == dim {
        // The Krylov space is the whole (deflated) space.
        return Ok(last.0);
    }
    Err(Error::NoConvergence {
        iterations: steps_cap,
        residual: last.1,
    })
}

/// Extreme eigenvalue of the Lanczos tridiagonal and its residual estimate
/// `|beta_m s_m|`.
fn tridiagonal_extreme(
    alpha: &[f64],
    beta: &[f64],
    next_beta: f64,
    sign: f64,
) -> Result<(f64, f64)> {
    let m = alpha.len();
    let t = Mat::from_fn(m, m, |r, c| {
        if r == c {
            alpha[r]
        } else if r + 1 == c {
            beta[r]
        } else if c + 1 == r {
            beta[c]
        } else {
            0.0
        }
    });
    let (values, vectors) = sym_eigen(&t)?;
    let idx = if sign > 0.0 { m - 1 } else { 0 };
    Ok((values[idx], (next_beta * vectors[(m - 1, idx)]).abs()))
}
