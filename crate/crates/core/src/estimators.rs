//! Spectral estimator and maximum-likelihood estimation by the generalized
//! power method, with an approximate KKT certificate of global optimality.

use crate::eigen::{extreme_eigenvalue, top_eigenpairs, Extreme};
use crate::error::{Error, Result};
use crate::linalg::{frob_inner, sym_eigen, Mat};
use crate::model::{BlockStack, Observation, SyncProblem};

/// Default iteration cap of the generalized power method.
pub const GPM_MAX_ITERS: usize = 100;
/// Iterates closer than this in Frobenius norm are treated as stationary.
pub const GPM_STATIONARITY: f64 = 1e-12;
/// Default KKT tolerance on both the residual and the eigenvalue gap.
pub const KKT_TOLERANCE: f64 = 1e-8;
/// Relative slack allowed when checking that the objective never decreases.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Leading eigenvectors of `C` and its top `d + 1` eigenvalues.
#[derive(Debug, Clone)]
pub struct TopEigen {
    /// `(n d) x d` with orthonormal columns.
    pub vectors: Mat,
    /// Descending, length `d + 1`.
    pub eigenvalues: Vec<f64>,
    pub iterations: usize,
}

/// Top `d` eigenvectors of the observation, plus `lambda_{d+1}` from the
/// complement of their span.
pub fn top_d_eigenvectors(c: &Observation, d: usize) -> Result<TopEigen> {
    let m = c.as_matrix();
    let pairs = top_eigenpairs(m, d)?;
    let mut eigenvalues = pairs.values.clone();
    let next = if d < m.nrows() {
        extreme_eigenvalue(m, Some(&pairs.vectors), Extreme::Largest)?
    } else {
        f64::NEG_INFINITY
    };
    eigenvalues.push(next);
    Ok(TopEigen {
        vectors: pairs.vectors,
        eigenvalues,
        iterations: pairs.iterations,
    })
}

#[derive(Debug, Clone)]
pub struct SpectralSolution {
    /// `sqrt(n)` times the top eigenvectors, so that `S^T S = n I`.
    pub s_eig: BlockStack,
    /// Blockwise polar rounding of `s_eig`.
    pub z_eig: BlockStack,
    pub eigenvalues: Vec<f64>,
    /// `max_i lambda_max(Pi_i) / lambda_min(Pi_i)` with `Pi_i = S_i^T S_i`.
    pub kappa: f64,
    pub iterations: usize,
}

impl SpectralSolution {
    /// `Pi_i = S_i^T S_i`.
    pub fn pi(&self, i: usize) -> Mat {
        let s = self.s_eig.block(i);
        s.transpose() * s
    }
}

pub fn spectral_estimate(problem: &SyncProblem) -> Result<SpectralSolution> {
    spectral_from_observation(&problem.observation)
}

pub fn spectral_from_observation(c: &Observation) -> Result<SpectralSolution> {
    let (n, d) = (c.n(), c.d());
    let top = top_d_eigenvectors(c, d)?;
    let s_eig = BlockStack::from_matrix(n, d, &top.vectors * (n as f64).sqrt())?;
    let z_eig = s_eig.round_blockwise()?;
    let mut kappa: f64 = 1.0;
    for i in 0..n {
        let s = s_eig.block(i);
        let (values, _) = sym_eigen(&(s.transpose() * &s))?;
        let lo = values[0];
        let hi = values[d - 1];
        if !(lo > 0.0) {
            return Err(Error::RankDeficient { ratio: lo / hi });
        }
        kappa = kappa.max(hi / lo);
    }
    Ok(SpectralSolution {
        s_eig,
        z_eig,
        eigenvalues: top.eigenvalues,
        kappa,
        iterations: top.iterations,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GpmOptions {
    pub max_iters: usize,
    pub kkt_tol: f64,
}

impl Default for GpmOptions {
    fn default() -> Self {
        Self {
            max_iters: GPM_MAX_ITERS,
            kkt_tol: KKT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MleSolution {
    pub z_hat: BlockStack,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub kkt_gap: f64,
    /// `residual <= tol` and `gap >= -tol`.
    pub certified: bool,
    /// `residual <= tol` and `gap >= tol`.
    pub certified_strict: bool,
    /// `<C, Z^t Z^t^T>` for `t = 0, 1, ...`.
    pub objective: Vec<f64>,
    /// Whether the objective never dropped by more than the allowed slack.
    pub monotone: bool,
}

/// `<C, Z Z^T> = <C Z, Z>`.
pub fn objective(c: &Observation, z: &BlockStack) -> f64 {
    frob_inner(&c.apply(z), z.as_matrix())
}

/// Generalized power method `Z^{t+1} = P_n(C Z^t)` from `init`, followed by
/// the KKT certificate of the final iterate.
pub fn gpm_estimate(c: &Observation, init: &BlockStack, opts: GpmOptions) -> Result<MleSolution> {
    let (n, d) = (c.n(), c.d());
    if init.n() != n || init.d() != d {
        return Err(Error::InvalidDims(
            "initial stack does not match the observation".into(),
        ));
    }
    if !init.is_orthogonal() {
        return Err(Error::NotOrthogonal {
            deviation: init.orthogonality_defect(),
        });
    }
    let mut z = init.clone();
    let mut cz = c.apply(&z);
    let mut objectives = vec![frob_inner(&cz, z.as_matrix())];
    let mut monotone = true;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let next = BlockStack::from_matrix(n, d, cz)?.round_blockwise()?;
        iterations += 1;
        let step = (next.as_matrix() - z.as_matrix()).norm();
        z = next;
        cz = c.apply(&z);
        let obj = frob_inner(&cz, z.as_matrix());
        let prev = *objectives.last().expect("objective history is non-empty");
        if obj < prev - MONOTONE_SLACK * prev.abs().max(1.0) {
            log::warn!("objective decreased at iteration {iterations}: {prev} -> {obj}");
            monotone = false;
        }
        objectives.push(obj);
        if step <= GPM_STATIONARITY {
            break;
        }
    }
    let cert = kkt_certificate(c, &z)?;
    Ok(MleSolution {
        z_hat: z,
        iterations,
        kkt_residual: cert.residual,
        kkt_gap: cert.gap,
        certified: cert.residual <= opts.kkt_tol && cert.gap >= -opts.kkt_tol,
        certified_strict: cert.residual <= opts.kkt_tol && cert.gap >= opts.kkt_tol,
        objective: objectives,
        monotone,
    })
}

/// MLE from the spectral initialization.
pub fn mle_estimate(
    problem: &SyncProblem,
    opts: GpmOptions,
) -> Result<(SpectralSolution, MleSolution)> {
    let spectral = spectral_estimate(problem)?;
    let mle = gpm_estimate(&problem.observation, &spectral.z_eig, opts)?;
    Ok((spectral, mle))
}

/// Which estimator an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mle,
    Spectral,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Mle => "mle",
            EstimatorKind::Spectral => "spectral",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(EstimatorKind::Mle),
            "spectral" => Ok(EstimatorKind::Spectral),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Orthogonal block estimate: `Z_hat` for the MLE, `Z_hat^eig` for the spectral method.
pub fn estimate(problem: &SyncProblem, kind: EstimatorKind) -> Result<BlockStack> {
    match kind {
        EstimatorKind::Spectral => Ok(spectral_estimate(problem)?.z_eig),
        EstimatorKind::Mle => Ok(mle_estimate(problem, GpmOptions::default())?.1.z_hat),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktCertificate {
    /// `||(Lambda - C) Z||_F`.
    pub residual: f64,
    /// `lambda_{d+1}(Lambda - C)`, bounded below through deflation by `Z`.
    pub gap: f64,
}

/// Block-diagonal dual `Lambda_ii = (A_i Z_i^T + Z_i A_i^T) / 2` with
/// `A = C Z`, returned as the list of diagonal blocks.
pub fn dual_blocks(c: &Observation, z: &BlockStack) -> Vec<Mat> {
    let a = c.apply(z);
    let d = z.d();
    (0..z.n())
        .map(|i| {
            let ai = a.view((i * d, 0), (d, d));
            let zi = z.block(i);
            let m = ai * zi.transpose();
            (&m + m.transpose()) * 0.5
        })
        .collect()
}

pub fn kkt_certificate(c: &Observation, z: &BlockStack) -> Result<KktCertificate> {
    let (n, d) = (z.n(), z.d());
    if c.n() != n || c.d() != d {
        return Err(Error::InvalidDims(
            "stack does not match the observation".into(),
        ));
    }
    let lambda = dual_blocks(c, z);
    let mut m = -c.as_matrix().clone();
    for (i, l) in lambda.iter().enumerate() {
        let mut view = m.view_mut((i * d, i * d), (d, d));
        view += l;
    }
    let residual = (&m * z.as_matrix()).norm();
    let basis = z.as_matrix() / (n as f64).sqrt();
    let gap = extreme_eigenvalue(&m, Some(&basis), Extreme::Smallest)?;
    Ok(KktCertificate { residual, gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        frobenius_block_distance, generate_problem, haar_orthogonal, rng_for, sample_ground_truth,
        sigma_from_c,
    };

    fn problem(n: usize, d: usize, c_sigma: f64, seed: u64) -> SyncProblem {
        let z = sample_ground_truth(n, d, seed).unwrap();
        generate_problem(&z, sigma_from_c(n, d, c_sigma), seed + 1).unwrap()
    }

    #[test]
    fn noiseless_spectrum() {
        let p = problem(12, 3, 0.0, 1);
        let top = top_d_eigenvectors(&p.observation, 3).unwrap();
        for v in &top.eigenvalues[..3] {
            assert!((v - 12.0).abs() < 1e-10);
        }
        assert!(top.eigenvalues[3].abs() < 1e-10);
    }

    #[test]
    fn noiseless_recovery_by_both_estimators() {
        let p = problem(30, 3, 0.0, 2);
        let (spec, mle) = mle_estimate(&p, GpmOptions::default()).unwrap();
        let (ds, _) = frobenius_block_distance(&spec.z_eig, &p.truth).unwrap();
        let (dm, _) = frobenius_block_distance(&mle.z_hat, &p.truth).unwrap();
        assert!(ds <= 1e-8 && dm <= 1e-8, "{ds} {dm}");
        assert!(mle.certified);
        assert!((spec.kappa - 1.0).abs() < 1e-8);
        let sts = spec.s_eig.as_matrix().transpose() * spec.s_eig.as_matrix();
        assert!((sts - Mat::identity(3, 3) * 30.0).norm() < 1e-8);
    }

    #[test]
    fn gpm_from_truth_is_fixed_point() {
        let p = problem(10, 2, 0.0, 3);
        let mle = gpm_estimate(&p.observation, &p.truth, GpmOptions::default()).unwrap();
        assert_eq!(mle.iterations, 1);
        assert!(mle.certified && mle.certified_strict);
        assert!((mle.z_hat.as_matrix() - p.truth.as_matrix()).norm() < 1e-12);
    }

    #[test]
    fn noiseless_certificate_values() {
        let p = problem(10, 2, 0.0, 4);
        let cert = kkt_certificate(&p.observation, &p.truth).unwrap();
        assert!(cert.residual <= 1e-10);
        assert!(cert.gap >= 5.0);
        assert!((cert.gap - 10.0).abs() < 1e-8);
    }

    #[test]
    fn random_stack_is_not_certified() {
        let p = problem(20, 3, 0.1, 5);
        let other = sample_ground_truth(20, 3, 99).unwrap();
        let cert = kkt_certificate(&p.observation, &other).unwrap();
        assert!(cert.residual > 1e-4);
    }

    #[test]
    fn certificate_is_rotation_invariant() {
        let p = problem(20, 3, 0.1, 6);
        let spec = spectral_estimate(&p).unwrap();
        let o = haar_orthogonal(3, &mut rng_for(7, 0));
        let a = kkt_certificate(&p.observation, &spec.z_eig).unwrap();
        let b = kkt_certificate(&p.observation, &spec.z_eig.rotate(o.as_matrix())).unwrap();
        assert!((a.residual - b.residual).abs() <= 1e-9 * a.residual.max(1.0));
        assert!((a.gap - b.gap).abs() <= 1e-7 * a.gap.abs().max(1.0));
    }

    #[test]
    fn gpm_is_rotation_equivariant_and_monotone() {
        let p = problem(40, 3, 0.15, 8);
        let spec = spectral_estimate(&p).unwrap();
        let o = haar_orthogonal(3, &mut rng_for(9, 0));
        let a = gpm_estimate(&p.observation, &spec.z_eig, GpmOptions::default()).unwrap();
        let b = gpm_estimate(
            &p.observation,
            &spec.z_eig.rotate(o.as_matrix()),
            GpmOptions::default(),
        )
        .unwrap();
        assert!((a.z_hat.rotate(o.as_matrix()).as_matrix() - b.z_hat.as_matrix()).norm() <= 1e-9);
        assert!(a.monotone && b.monotone);
        assert!(a.certified);
    }

    #[test]
    fn high_snr_spectral_blocks_are_nearly_orthogonal() {
        let (n, d, c_sigma) = (400, 3, 0.05);
        let p = problem(n, d, c_sigma, 10);
        let spec = spectral_estimate(&p).unwrap();
        let mut devs: Vec<f64> = (0..n)
            .map(|i| crate::linalg::op_norm(&(spec.pi(i) - Mat::identity(d, d))))
            .collect();
        devs.sort_by(f64::total_cmp);
        let rate = c_sigma / (d as f64).sqrt() * crate::model::snr_threshold(n, d);
        let median = devs[n / 2];
        let worst = devs[n - 1];
        assert!(median <= 0.2, "median ||Pi_i - I|| = {median}");
        assert!(
            worst <= 3.0 * rate,
            "max ||Pi_i - I|| = {worst}, rate {rate}"
        );
        assert!(spec.kappa >= 1.0 && spec.kappa < 2.0);
    }

    #[test]
    fn kappa_grows_with_noise() {
        let lo = spectral_estimate(&problem(100, 3, 0.05, 11)).unwrap().kappa;
        let hi = spectral_estimate(&problem(100, 3, 0.4, 11)).unwrap().kappa;
        assert!(lo >= 1.0 && hi > lo);
    }

    #[test]
    fn mismatched_init_is_rejected() {
        let p = problem(10, 2, 0.1, 12);
        let init = sample_ground_truth(11, 2, 1).unwrap();
        assert!(gpm_estimate(&p.observation, &init, GpmOptions::default()).is_err());
    }
}
