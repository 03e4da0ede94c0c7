//! Uncertainty quantification: first-order expansion statistics, noise level
//! estimation, chi-squared confidence regions and KS normality checks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind};
use crate::linalg::{skew, sym, Mat};
use crate::manifold::OrthogonalMatrix;
use crate::model::{
    frobenius_block_distance, generate_problem, sample_ground_truth, trial_seed, BlockStack,
    Observation, SyncProblem,
};
use crate::stats::{chi2_quantile, ks_test_normal, KsResult};

/// Default `C0` in the confidence-region constant.
pub const DEFAULT_C0: f64 = 1.0;

/// Absolute slack in the ball membership test, so that an exact estimate is
/// covered by the zero-radius region of a noiseless problem.
pub const COVER_TOLERANCE: f64 = 1e-10;

/// Upper bound on the number of pairs used for pairwise coverage.
pub const MAX_PAIRS: usize = 100;

/// `||S S^T - C||_F^2 / (n (n-1) d^2)`.
pub fn estimate_sigma2(c: &Observation, s: &BlockStack) -> Result<f64> {
    let (n, d) = (s.n(), s.d());
    if c.n() != n || c.d() != d {
        return Err(Error::InvalidDims(format!(
            "observation is ({}, {}) but stack is ({n}, {d})",
            c.n(),
            c.d()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidDims("sigma estimation needs n >= 2".into()));
    }
    let sm = s.as_matrix();
    let cm = c.as_matrix();
    let mut total = 0.0;
    for j in 0..n {
        let sj = sm.rows(j * d, d);
        let residual = sm * sj.transpose() - cm.columns(j * d, d);
        total += residual.norm_squared();
    }
    Ok(total / (n * (n - 1) * d * d) as f64)
}

/// `c_{1-alpha} = sqrt(chi2_{d(d-1)/2, 1-alpha}) + C0 sigma_hat n^{-1/2} d (sqrt d + sqrt log n)^2`.
pub fn c_value(n: usize, d: usize, alpha: f64, sigma_hat: f64, c0: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidProbability(alpha));
    }
    if d < 2 {
        return Err(Error::InvalidDims("confidence regions need d >= 2".into()));
    }
    let df = (d * (d - 1) / 2) as u32;
    let nf = n as f64;
    let df_f = d as f64;
    let bulk = df_f.sqrt() + nf.ln().sqrt();
    Ok(chi2_quantile(df, 1.0 - alpha)?.sqrt() + c0 * sigma_hat / nf.sqrt() * df_f * bulk * bulk)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceRegion {
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub c0: f64,
    pub sigma_hat: f64,
    pub c_value: f64,
    /// `n^{-1/2} sigma_hat c_{1-alpha}`.
    pub radius: f64,
    /// `c_{1-alpha/2}`, used per factor of a pairwise region.
    pub pair_c_value: f64,
    pub pair_radius: f64,
}

impl ConfidenceRegion {
    /// Whether the aligned truth block `Z_i Q` lies in the region around `S_i`.
    pub fn covers(&self, truth_aligned: &Mat, estimate: &Mat) -> bool {
        ball_distance(truth_aligned, estimate) <= self.radius + COVER_TOLERANCE
    }

    /// Whether `Z_i Z_j^T` lies in the pairwise region around `S_i S_j^T`.
    pub fn covers_pair(
        &self,
        truth_i: &Mat,
        truth_j: &Mat,
        estimate_i: &Mat,
        estimate_j: &Mat,
    ) -> bool {
        ball_distance(truth_i, estimate_i) <= self.pair_radius + COVER_TOLERANCE
            && ball_distance(truth_j, estimate_j) <= self.pair_radius + COVER_TOLERANCE
    }
}

/// `||Z_i Q S_i^T - I||_F`.
pub fn ball_distance(truth_aligned: &Mat, estimate: &Mat) -> f64 {
    let d = estimate.nrows();
    (truth_aligned * estimate.transpose() - Mat::identity(d, d)).norm()
}

pub fn confidence_region(
    s: &BlockStack,
    c: &Observation,
    alpha: f64,
    c0: f64,
) -> Result<ConfidenceRegion> {
    let sigma_hat = estimate_sigma2(c, s)?.sqrt();
    region_with_sigma(s.n(), s.d(), alpha, c0, sigma_hat)
}

/// Region with a given noise level, e.g. the true `sigma` in verification runs.
pub fn region_with_sigma(
    n: usize,
    d: usize,
    alpha: f64,
    c0: f64,
    sigma_hat: f64,
) -> Result<ConfidenceRegion> {
    let c = c_value(n, d, alpha, sigma_hat, c0)?;
    let pair_c = c_value(n, d, alpha / 2.0, sigma_hat, c0)?;
    let scale = sigma_hat / (n as f64).sqrt();
    Ok(ConfidenceRegion {
        n,
        d,
        alpha,
        c0,
        sigma_hat,
        c_value: c,
        radius: scale * c,
        pair_c_value: pair_c,
        pair_radius: scale * pair_c,
    })
}

/// Expansion statistics of one block, with `M = Z_hat_i Q^T Z_i^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockExpansion {
    /// `M - I`.
    pub first_order_residual: Mat,
    pub skew_part: Mat,
    pub sym_part: Mat,
    /// `||M + M^T - 2I||_F`.
    pub sym_residual_norm: f64,
    /// `||Z_hat_i - Z_i Q||_F / sqrt(d(d-1))`.
    pub coef_stat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionReport {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub q: OrthogonalMatrix,
    /// `sigma sqrt(n-1) / (sqrt(2) n)`.
    pub theoretical_coef: f64,
    pub blocks: Vec<BlockExpansion>,
}

pub fn expansion_report(problem: &SyncProblem, estimate: &BlockStack) -> Result<ExpansionReport> {
    let (n, d) = (problem.n(), problem.d());
    let (_, q) = frobenius_block_distance(estimate, &problem.truth)?;
    let qm = q.as_matrix();
    let norm = ((d * (d - 1)) as f64).sqrt();
    let blocks = (0..n)
        .map(|i| {
            let zi = problem.truth.block(i);
            let hat = estimate.block(i);
            let m = &hat * qm.transpose() * zi.transpose();
            let resid = &m - Mat::identity(d, d);
            let coef = if norm > 0.0 {
                (&hat - &zi * qm).norm() / norm
            } else {
                0.0
            };
            BlockExpansion {
                skew_part: skew(&resid),
                sym_part: sym(&resid),
                sym_residual_norm: (&m + m.transpose() - Mat::identity(d, d) * 2.0).norm(),
                coef_stat: coef,
                first_order_residual: resid,
            }
        })
        .collect();
    let nf = n as f64;
    Ok(ExpansionReport {
        n,
        d,
        sigma: problem.sigma,
        q,
        theoretical_coef: problem.sigma * (nf - 1.0).sqrt() / (2f64.sqrt() * nf),
        blocks,
    })
}

/// Upper-triangular entries of `sqrt(2) n / (sigma sqrt(n-1)) (Z_hat_i (Z_i Q)^T - I)`,
/// approximately iid standard normal.
pub fn standardized_entries(block: &BlockExpansion, sigma: f64, n: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSigma(sigma));
    }
    let nf = n as f64;
    let scale = 2f64.sqrt() * nf / (sigma * (nf - 1.0).sqrt());
    let r = &block.first_order_residual;
    let d = r.nrows();
    let mut out = Vec::with_capacity(d * (d - 1) / 2);
    for a in 0..d {
        for b in a + 1..d {
            out.push(scale * r[(a, b)]);
        }
    }
    Ok(out)
}

/// Per-block KS test of the standardized first-order entries.
pub fn ks_normality(report: &ExpansionReport, sigma: f64) -> Result<Vec<KsResult>> {
    report
        .blocks
        .iter()
        .map(|b| {
            let sample = standardized_entries(b, sigma, report.n)?;
            if sample.is_empty() {
                return Err(Error::SampleTooSmall(0));
            }
            ks_test_normal(&sample)
        })
        .collect()
}

/// Noise level used to standardize the KS entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KsSigma {
    /// The true `sigma` of the simulation.
    #[default]
    True,
    /// `sigma_hat` from the residual.
    Estimated,
}

/// One row of the UQ table.
#[derive(Debug, Clone, PartialEq)]
pub struct UqRow {
    pub trial: usize,
    pub block: usize,
    pub sym_residual: f64,
    pub coef_stat: f64,
    /// `None` when `sigma = 0`.
    pub ks: Option<KsResult>,
    pub covered: bool,
    pub radius: f64,
    pub sigma_hat: f64,
}

pub const UQ_CSV_HEADER: &str =
    "trial,block,sym_residual,coef_stat,ks_D,ks_p,covered,radius,sigma_hat";

impl UqRow {
    pub fn to_csv_line(&self) -> String {
        let (ks_d, ks_p) = match self.ks {
            Some(k) => (format!("{:e}", k.statistic), format!("{:e}", k.p_value)),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{:e},{:e},{},{},{},{:e},{:e}",
            self.trial,
            self.block,
            self.sym_residual,
            self.coef_stat,
            ks_d,
            ks_p,
            u8::from(self.covered),
            self.radius,
            self.sigma_hat
        )
    }
}

pub fn rows_to_csv(rows: &[UqRow]) -> String {
    let mut out = String::from(UQ_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Expansion, confidence region and KS statistics for one estimate.
#[derive(Debug, Clone)]
pub struct UqTrial {
    pub report: ExpansionReport,
    pub region: ConfidenceRegion,
    pub rows: Vec<UqRow>,
    /// Pairwise coverage indicators for [`pair_sample`].
    pub pairs_covered: Vec<bool>,
}

/// Fixed pairs `(2k, 2k+1)` used for pairwise coverage.
pub fn pair_sample(n: usize) -> Vec<(usize, usize)> {
    (0..(n / 2).min(MAX_PAIRS))
        .map(|k| (2 * k, 2 * k + 1))
        .collect()
}

pub fn uq_trial(
    problem: &SyncProblem,
    estimate: &BlockStack,
    trial: usize,
    alpha: f64,
    c0: f64,
    ks_sigma: KsSigma,
) -> Result<UqTrial> {
    let report = expansion_report(problem, estimate)?;
    let region = confidence_region(estimate, &problem.observation, alpha, c0)?;
    let aligned_truth = problem.truth.rotate(report.q.as_matrix());
    let sigma_ks = match ks_sigma {
        KsSigma::True => problem.sigma,
        KsSigma::Estimated => region.sigma_hat,
    };
    let ks = if sigma_ks > 0.0 && report.d >= 2 {
        Some(ks_normality(&report, sigma_ks)?)
    } else {
        None
    };
    let rows = report
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| UqRow {
            trial,
            block: i,
            sym_residual: b.sym_residual_norm,
            coef_stat: b.coef_stat,
            ks: ks.as_ref().map(|k| k[i]),
            covered: region.covers(&aligned_truth.block(i), &estimate.block(i)),
            radius: region.radius,
            sigma_hat: region.sigma_hat,
        })
        .collect();
    let pairs_covered = pair_sample(problem.n())
        .into_iter()
        .map(|(i, j)| {
            region.covers_pair(
                &aligned_truth.block(i),
                &aligned_truth.block(j),
                &estimate.block(i),
                &estimate.block(j),
            )
        })
        .collect();
    Ok(UqTrial {
        report,
        region,
        rows,
        pairs_covered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageConfig {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub c0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageResult {
    pub block_coverage: f64,
    pub pair_coverage: f64,
    pub mean_radius: f64,
    pub trials: usize,
}

/// Runs one simulated problem per trial (seed `trial_seed(seed, t)`), in parallel.
pub fn coverage_experiment(cfg: &CoverageConfig) -> Result<CoverageResult> {
    if cfg.trials == 0 {
        return Err(Error::Config("coverage needs at least one trial".into()));
    }
    let per_trial: Vec<(usize, usize, usize, usize, f64)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(cfg.seed, t as u64);
            let truth = sample_ground_truth(cfg.n, cfg.d, seed)?;
            let problem = generate_problem(&truth, cfg.sigma, seed)?;
            let est = estimate(&problem, cfg.estimator)?;
            let out = uq_trial(&problem, &est, t, cfg.alpha, cfg.c0, KsSigma::True)?;
            Ok((
                out.rows.iter().filter(|r| r.covered).count(),
                out.rows.len(),
                out.pairs_covered.iter().filter(|&&c| c).count(),
                out.pairs_covered.len(),
                out.region.radius,
            ))
        })
        .collect::<Result<_>>()?;
    let (mut covered, mut blocks, mut pc, mut pt, mut radius) = (0, 0, 0, 0, 0.0);
    for (c, b, p, q, r) in per_trial {
        covered += c;
        blocks += b;
        pc += p;
        pt += q;
        radius += r;
    }
    Ok(CoverageResult {
        block_coverage: covered as f64 / blocks as f64,
        pair_coverage: if pt == 0 { 1.0 } else { pc as f64 / pt as f64 },
        mean_radius: radius / cfg.trials as f64,
        trials: cfg.trials,
    })
}
