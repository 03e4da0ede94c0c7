//! Monte Carlo experiment runner: sweeps of `C_sigma` with per-block
//! statistics, boxplot summaries and log-log scaling fits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{
    gpm_estimate, spectral_estimate, EstimatorKind, GpmOptions, KKT_TOLERANCE,
};
use crate::model::{
    generate_problem, sample_ground_truth, sigma_from_c, trial_seed, GAUSSIAN_METHOD, RNG_NAME,
};
use crate::newton::{mle_newton_report, spectral_newton_report, NewtonReport};
use crate::stats::quantile_sorted;
use crate::uq::{ball_distance, region_with_sigma, uq_trial, KsSigma, COVER_TOLERANCE};

/// Largest `C_sigma` accepted in a sweep.
pub const MAX_C_SIGMA: f64 = 0.5;

/// Significance level for the KS rejection fractions.
pub const KS_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub sigma_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub gpm_max_iters: usize,
    /// The first level drives the `covered`/`radius` columns; all levels are summarized.
    pub alphas: Vec<f64>,
    pub c0: f64,
    pub ks_sigma: KsSigma,
    /// Compute Newton-step gaps for every block.
    pub newton: bool,
    /// Worker threads; `None` uses the rayon default.
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `0.05, 0.10, ..., 0.50`.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 20.0).collect()
}

impl ExperimentConfig {
    /// `n = 200, d = 3`, five trials per grid point.
    pub fn desk() -> Self {
        ExperimentConfig {
            n: 200,
            d: 3,
            sigma_grid: default_grid(),
            trials: 5,
            seed: 1,
            estimators: vec![EstimatorKind::Mle, EstimatorKind::Spectral],
            gpm_max_iters: crate::estimators::GPM_MAX_ITERS,
            alphas: vec![0.05],
            c0: crate::uq::DEFAULT_C0,
            ks_sigma: KsSigma::True,
            newton: true,
            workers: None,
            output_dir: None,
        }
    }

    /// `n = 800, d = 5`, one trial per grid point.
    pub fn paper_scale() -> Self {
        ExperimentConfig {
            n: 800,
            d: 5,
            trials: 1,
            ..Self::desk()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n < 2 || self.d < 2 {
            return fail(format!(
                "need n >= 2 and d >= 2, got n={}, d={}",
                self.n, self.d
            ));
        }
        if self.sigma_grid.is_empty() {
            return fail("sigma_grid is empty".into());
        }
        if let Some(c) = self
            .sigma_grid
            .iter()
            .find(|c| !(c.is_finite() && **c >= 0.0 && **c <= MAX_C_SIGMA))
        {
            return fail(format!("C_sigma {c} outside [0, {MAX_C_SIGMA}]"));
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return fail("no estimators selected".into());
        }
        for (k, e) in self.estimators.iter().enumerate() {
            if self.estimators[..k].contains(e) {
                return fail(format!("estimator `{}` listed twice", e.name()));
            }
        }
        if self.gpm_max_iters == 0 {
            return fail("gpm_max_iters must be at least 1".into());
        }
        if self.alphas.is_empty() {
            return fail("alphas is empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return fail(format!("alpha {a} outside (0, 1)"));
        }
        if !(self.c0.is_finite() && self.c0 >= 0.0) {
            return fail(format!(
                "C0 must be finite and nonnegative, got {}",
                self.c0
            ));
        }
        if self.workers == Some(0) {
            return fail("workers must be at least 1".into());
        }
        Ok(())
    }
}

/// One block of one estimate, or a failed trial (`block = None`, `error` set).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub c_sigma: f64,
    pub sigma: f64,
    pub trial: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub block: Option<usize>,
    /// KKT certificate of the MLE; `None` for the spectral estimator.
    pub certified: Option<bool>,
    pub sym_residual: Option<f64>,
    pub coef_stat: Option<f64>,
    pub theoretical_coef: Option<f64>,
    pub ks_d: Option<f64>,
    pub ks_p: Option<f64>,
    /// `||Z_i Q S_i^T - I||_F`.
    pub ball_distance: Option<f64>,
    pub radius: Option<f64>,
    pub covered: Option<bool>,
    pub sigma_hat: Option<f64>,
    pub gap_v: Option<f64>,
    pub gap_v_closed: Option<f64>,
    pub gap_z: Option<f64>,
    pub error: Option<String>,
}

pub const RESULT_CSV_HEADER: &str =
    "c_sigma,sigma,trial,seed,estimator,block,certified,sym_residual,coef_stat,\
theoretical_coef,ks_D,ks_p,ball_distance,radius,covered,sigma_hat,gap_V,gap_V_closed,gap_Z,error";

fn num(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

fn flag(x: Option<bool>) -> String {
    x.map(|b| u8::from(b).to_string()).unwrap_or_default()
}

impl ResultRow {
    fn failed(
        c_sigma: f64,
        sigma: f64,
        trial: usize,
        seed: u64,
        estimator: EstimatorKind,
        err: &Error,
    ) -> Self {
        ResultRow {
            c_sigma,
            sigma,
            trial,
            seed,
            estimator,
            block: None,
            certified: None,
            sym_residual: None,
            coef_stat: None,
            theoretical_coef: None,
            ks_d: None,
            ks_p: None,
            ball_distance: None,
            radius: None,
            covered: None,
            sigma_hat: None,
            gap_v: None,
            gap_v_closed: None,
            gap_z: None,
            error: Some(err.kind().to_string()),
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{:e},{:e},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.c_sigma,
            self.sigma,
            self.trial,
            self.seed,
            self.estimator.name(),
            self.block.map(|b| b.to_string()).unwrap_or_default(),
            flag(self.certified),
            num(self.sym_residual),
            num(self.coef_stat),
            num(self.theoretical_coef),
            num(self.ks_d),
            num(self.ks_p),
            num(self.ball_distance),
            num(self.radius),
            flag(self.covered),
            num(self.sigma_hat),
            num(self.gap_v),
            num(self.gap_v_closed),
            num(self.gap_z),
            self.error.as_deref().unwrap_or("")
        )
    }
}

/// `# seed=<seed> rng=chacha20 gaussian=ziggurat`, the first line of every output file.
pub fn seed_header(seed: u64) -> String {
    format!("# seed={seed} rng={RNG_NAME} gaussian={GAUSSIAN_METHOD}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub seed: u64,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", seed_header(self.seed));
        let _ = writeln!(out, "{RESULT_CSV_HEADER}");
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.to_csv_line());
        }
        out
    }

    /// SHA-256 of the CSV rendering, hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_csv().as_bytes()))
    }

    /// `(failed, total)` trials, counting each (grid point, trial) once.
    pub fn trial_failures(&self) -> (usize, usize) {
        let mut seen: BTreeMap<(u64, usize), bool> = BTreeMap::new();
        for r in &self.rows {
            let failed = r.block.is_none();
            let e = seen.entry((r.c_sigma.to_bits(), r.trial)).or_insert(false);
            *e |= failed;
        }
        (seen.values().filter(|f| **f).count(), seen.len())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Seed of trial `trial` at grid point `grid_index`.
pub fn grid_trial_seed(cfg: &ExperimentConfig, grid_index: usize, trial: usize) -> u64 {
    trial_seed(cfg.seed, (grid_index * cfg.trials + trial) as u64)
}

/// Rows of one (grid point, trial) unit. Failures become tagged rows.
pub fn run_trial(cfg: &ExperimentConfig, grid_index: usize, trial: usize) -> Vec<ResultRow> {
    let c_sigma = cfg.sigma_grid[grid_index];
    let sigma = sigma_from_c(cfg.n, cfg.d, c_sigma);
    let seed = grid_trial_seed(cfg, grid_index, trial);
    match trial_rows(cfg, c_sigma, sigma, seed, trial) {
        Ok(rows) => rows,
        Err(e) => {
            log::warn!("C_sigma={c_sigma} trial={trial} seed={seed}: {e}");
            cfg.estimators
                .iter()
                .map(|&k| ResultRow::failed(c_sigma, sigma, trial, seed, k, &e))
                .collect()
        }
    }
}

type NewtonGaps = Vec<std::result::Result<(f64, f64, f64), String>>;

fn newton_gaps(report: &NewtonReport, n: usize) -> NewtonGaps {
    let mut out: NewtonGaps = vec![Err("newton_missing".into()); n];
    for e in &report.entries {
        out[e.block] = Ok((e.gap_v, e.gap_v_closed_form, e.gap_z));
    }
    for (i, err) in &report.failures {
        out[*i] = Err(err.kind().to_string());
    }
    out
}

fn trial_rows(
    cfg: &ExperimentConfig,
    c_sigma: f64,
    sigma: f64,
    seed: u64,
    trial: usize,
) -> Result<Vec<ResultRow>> {
    let truth = sample_ground_truth(cfg.n, cfg.d, seed)?;
    let problem = generate_problem(&truth, sigma, seed)?;
    let spectral = spectral_estimate(&problem)?;
    let needs_mle = cfg.estimators.contains(&EstimatorKind::Mle);
    let mle = if needs_mle {
        let opts = GpmOptions {
            max_iters: cfg.gpm_max_iters,
            kkt_tol: KKT_TOLERANCE,
        };
        Some(gpm_estimate(&problem.observation, &spectral.z_eig, opts)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(cfg.n * cfg.estimators.len());
    for &kind in &cfg.estimators {
        let (est, certified) = match (kind, &mle) {
            (EstimatorKind::Mle, Some(m)) => (&m.z_hat, Some(m.certified)),
            _ => (&spectral.z_eig, None),
        };
        let uq = uq_trial(&problem, est, trial, cfg.alphas[0], cfg.c0, cfg.ks_sigma)?;
        let gaps = if cfg.newton {
            let report = match kind {
                EstimatorKind::Mle => mle_newton_report(&problem, est)?,
                EstimatorKind::Spectral => spectral_newton_report(&problem, &spectral)?,
            };
            Some(newton_gaps(&report, cfg.n))
        } else {
            None
        };
        let aligned = problem.truth.rotate(uq.report.q.as_matrix());
        for (i, u) in uq.rows.iter().enumerate() {
            let gap = gaps.as_ref().map(|g| &g[i]);
            let ok_gap = gap.and_then(|g| g.as_ref().ok());
            rows.push(ResultRow {
                c_sigma,
                sigma,
                trial,
                seed,
                estimator: kind,
                block: Some(i),
                certified,
                sym_residual: Some(u.sym_residual),
                coef_stat: Some(u.coef_stat),
                theoretical_coef: Some(uq.report.theoretical_coef),
                ks_d: u.ks.map(|k| k.statistic),
                ks_p: u.ks.map(|k| k.p_value),
                ball_distance: Some(ball_distance(&aligned.block(i), &est.block(i))),
                radius: Some(u.radius),
                covered: Some(u.covered),
                sigma_hat: Some(u.sigma_hat),
                gap_v: ok_gap.map(|g| g.0),
                gap_v_closed: ok_gap.map(|g| g.1),
                gap_z: ok_gap.map(|g| g.2),
                error: gap.and_then(|g| g.as_ref().err().map(|e| format!("newton:{e}"))),
            });
        }
    }
    Ok(rows)
}

/// Runs every (grid point, trial) unit in parallel and merges the rows in
/// (grid, trial) order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let units: Vec<(usize, usize)> = (0..cfg.sigma_grid.len())
        .flat_map(|g| (0..cfg.trials).map(move |t| (g, t)))
        .collect();
    let work = || -> Vec<Vec<ResultRow>> {
        units
            .par_iter()
            .map(|&(g, t)| run_trial(cfg, g, t))
            .collect()
    };
    let chunks = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    Ok(ResultTable {
        seed: cfg.seed,
        rows: chunks.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    SymResidual,
    CoefStat,
    KsP,
    BallDistance,
    GapV,
    GapVClosed,
    GapZ,
}

impl Statistic {
    pub const ALL: [Statistic; 7] = [
        Statistic::SymResidual,
        Statistic::CoefStat,
        Statistic::KsP,
        Statistic::BallDistance,
        Statistic::GapV,
        Statistic::GapVClosed,
        Statistic::GapZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::SymResidual => "sym_residual",
            Statistic::CoefStat => "coef_stat",
            Statistic::KsP => "ks_p",
            Statistic::BallDistance => "ball_distance",
            Statistic::GapV => "gap_V",
            Statistic::GapVClosed => "gap_V_closed",
            Statistic::GapZ => "gap_Z",
        }
    }

    pub fn value(self, row: &ResultRow) -> Option<f64> {
        match self {
            Statistic::SymResidual => row.sym_residual,
            Statistic::CoefStat => row.coef_stat,
            Statistic::KsP => row.ks_p,
            Statistic::BallDistance => row.ball_distance,
            Statistic::GapV => row.gap_v,
            Statistic::GapVClosed => row.gap_v_closed,
            Statistic::GapZ => row.gap_z,
        }
    }
}

/// Quartiles, 1.5 IQR whiskers and outlier count of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub count: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// Smallest value at or above `q25 - 1.5 IQR`.
    pub whisker_lo: f64,
    /// Largest value at or below `q75 + 1.5 IQR`.
    pub whisker_hi: f64,
    pub outliers: usize,
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::EmptySelection("empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q25 = quantile_sorted(&v, 0.25);
    let q75 = quantile_sorted(&v, 0.75);
    let iqr = q75 - q25;
    let (lo_fence, hi_fence) = (q25 - 1.5 * iqr, q75 + 1.5 * iqr);
    let inside: Vec<f64> = v
        .iter()
        .copied()
        .filter(|x| *x >= lo_fence && *x <= hi_fence)
        .collect();
    Ok(BoxStats {
        count: v.len(),
        median: quantile_sorted(&v, 0.5),
        q25,
        q75,
        whisker_lo: inside.first().copied().unwrap_or(q25),
        whisker_hi: inside.last().copied().unwrap_or(q75),
        outliers: v.len() - inside.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxplotSummary {
    pub estimator: EstimatorKind,
    pub statistic: Statistic,
    pub c_sigma: f64,
    #[serde(flatten)]
    pub stats: BoxStats,
}

/// Groups values of `statistic` by `C_sigma` in order of first appearance.
/// Grid points without any value are skipped.
pub fn summarize(
    table: &ResultTable,
    statistic: Statistic,
    estimator: EstimatorKind,
) -> Result<Vec<BoxplotSummary>> {
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in table.rows.iter().filter(|r| r.estimator == estimator) {
        let Some(v) = statistic.value(r).filter(|v| v.is_finite()) else {
            continue;
        };
        match groups
            .iter_mut()
            .find(|(c, _)| c.to_bits() == r.c_sigma.to_bits())
        {
            Some((_, vals)) => vals.push(v),
            None => groups.push((r.c_sigma, vec![v])),
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptySelection(format!(
            "{} / {}",
            statistic.name(),
            estimator.name()
        )));
    }
    groups
        .into_iter()
        .map(|(c_sigma, vals)| {
            Ok(BoxplotSummary {
                estimator,
                statistic,
                c_sigma,
                stats: box_stats(&vals)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares fit of `log(median)` against `log(C_sigma)`.
pub fn fit_loglog_slope(series: &[BoxplotSummary]) -> Result<LogLogFit> {
    let points: Vec<(f64, f64)> = series.iter().map(|s| (s.c_sigma, s.stats.median)).collect();
    fit_loglog(&points)
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "{} points, need at least 3",
            points.len()
        )));
    }
    if let Some((x, y)) = points
        .iter()
        .find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(Error::DegenerateFit(format!(
            "nonpositive point ({x}, {y})"
        )));
    }
    let m = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all C_sigma values are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LogLogFit {
        slope,
        intercept,
        r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub estimator: EstimatorKind,
    pub statistic: Statistic,
    pub fit: std::result::Result<LogLogFit, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageSummary {
    pub estimator: EstimatorKind,
    pub c_sigma: f64,
    pub alpha: f64,
    pub coverage: f64,
    pub blocks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateSummary {
    pub estimator: EstimatorKind,
    pub c_sigma: f64,
    pub rate: f64,
    pub count: usize,
}

/// A recorded expectation that does not fail the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoftCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub rng: &'static str,
    pub gaussian: &'static str,
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    pub trials_total: usize,
    pub trials_failed: usize,
    pub digest: String,
    pub boxplots: Vec<BoxplotSummary>,
    pub fits: Vec<FitSummary>,
    pub coverage: Vec<CoverageSummary>,
    pub ks_rejection: Vec<RateSummary>,
    /// Fraction of trials whose MLE carries a KKT certificate.
    pub certified: Vec<RateSummary>,
    pub soft_checks: Vec<SoftCheck>,
}

impl ExperimentSummary {
    pub fn series(&self, estimator: EstimatorKind, statistic: Statistic) -> Vec<&BoxplotSummary> {
        self.boxplots
            .iter()
            .filter(|b| b.estimator == estimator && b.statistic == statistic)
            .collect()
    }

    pub fn fit(&self, estimator: EstimatorKind, statistic: Statistic) -> Option<&FitSummary> {
        self.fits
            .iter()
            .find(|f| f.estimator == estimator && f.statistic == statistic)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

fn grid_rates(
    table: &ResultTable,
    estimator: EstimatorKind,
    mut pick: impl FnMut(&ResultRow) -> Option<bool>,
) -> Vec<(f64, usize, usize)> {
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for r in table.rows.iter().filter(|r| r.estimator == estimator) {
        let Some(hit) = pick(r) else { continue };
        let idx = match out
            .iter()
            .position(|(c, _, _)| c.to_bits() == r.c_sigma.to_bits())
        {
            Some(i) => i,
            None => {
                out.push((r.c_sigma, 0, 0));
                out.len() - 1
            }
        };
        out[idx].1 += usize::from(hit);
        out[idx].2 += 1;
    }
    out
}

/// Boxplots of every statistic, log-log fits over the positive grid points,
/// coverage for every level, KS rejection and certification rates.
pub fn analyze(cfg: &ExperimentConfig, table: &ResultTable) -> ExperimentSummary {
    let mut boxplots = Vec::new();
    let mut fits = Vec::new();
    for &est in &cfg.estimators {
        for stat in Statistic::ALL {
            let Ok(series) = summarize(table, stat, est) else {
                continue;
            };
            if matches!(
                stat,
                Statistic::SymResidual | Statistic::GapV | Statistic::GapVClosed | Statistic::GapZ
            ) {
                let positive: Vec<BoxplotSummary> =
                    series.iter().filter(|s| s.c_sigma > 0.0).cloned().collect();
                fits.push(FitSummary {
                    estimator: est,
                    statistic: stat,
                    fit: fit_loglog_slope(&positive).map_err(|e| e.to_string()),
                });
            }
            boxplots.extend(series);
        }
    }

    let mut coverage = Vec::new();
    for &est in &cfg.estimators {
        for &alpha in &cfg.alphas {
            let rates = grid_rates(table, est, |r| {
                let (dist, sh) = (r.ball_distance?, r.sigma_hat?);
                let region = region_with_sigma(cfg.n, cfg.d, alpha, cfg.c0, sh).ok()?;
                Some(dist <= region.radius + COVER_TOLERANCE)
            });
            coverage.extend(
                rates
                    .into_iter()
                    .map(|(c_sigma, hits, total)| CoverageSummary {
                        estimator: est,
                        c_sigma,
                        alpha,
                        coverage: hits as f64 / total as f64,
                        blocks: total,
                    }),
            );
        }
    }

    let rate = |est, pick: &mut dyn FnMut(&ResultRow) -> Option<bool>| -> Vec<RateSummary> {
        grid_rates(table, est, pick)
            .into_iter()
            .map(|(c_sigma, hits, total)| RateSummary {
                estimator: est,
                c_sigma,
                rate: hits as f64 / total as f64,
                count: total,
            })
            .collect()
    };
    let mut ks_rejection = Vec::new();
    let mut certified = Vec::new();
    for &est in &cfg.estimators {
        ks_rejection.extend(rate(est, &mut |r| r.ks_p.map(|p| p < KS_LEVEL)));
        if est == EstimatorKind::Mle {
            certified.extend(rate(est, &mut |r| {
                if r.block == Some(0) {
                    r.certified
                } else {
                    None
                }
            }));
        }
    }

    let mut soft_checks = Vec::new();
    let intercept = |est| match fits
        .iter()
        .find(|f: &&FitSummary| f.estimator == est && f.statistic == Statistic::SymResidual)
    {
        Some(FitSummary { fit: Ok(f), .. }) => Some(f.intercept),
        _ => None,
    };
    if let (Some(spec), Some(mle)) = (
        intercept(EstimatorKind::Spectral),
        intercept(EstimatorKind::Mle),
    ) {
        let passed = spec >= mle;
        let detail = format!(
            "second-order fit coefficients: spectral {:.4}, mle {:.4}",
            spec.exp(),
            mle.exp()
        );
        if !passed {
            log::warn!("soft check failed: spectral intercept below MLE intercept ({detail})");
        }
        soft_checks.push(SoftCheck {
            name: "spectral_intercept_ge_mle".into(),
            passed,
            detail,
        });
    }

    let (trials_failed, trials_total) = table.trial_failures();
    ExperimentSummary {
        seed: cfg.seed,
        rng: RNG_NAME,
        gaussian: GAUSSIAN_METHOD,
        n: cfg.n,
        d: cfg.d,
        trials: cfg.trials,
        trials_total,
        trials_failed,
        digest: table.digest(),
        boxplots,
        fits,
        coverage,
        ks_rejection,
        certified,
        soft_checks,
    }
}

pub const SUMMARY_CSV_HEADER: &str =
    "estimator,statistic,c_sigma,count,median,q25,q75,whisker_lo,whisker_hi,outliers,reference";

/// Boxplot rows of one statistic as CSV. For `coef_stat` the `reference`
/// column holds `sigma sqrt(n-1) / (sqrt(2) n)`.
pub fn summary_csv(
    cfg: &ExperimentConfig,
    summary: &ExperimentSummary,
    statistic: Statistic,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", seed_header(summary.seed));
    let _ = writeln!(out, "{SUMMARY_CSV_HEADER}");
    for b in summary.boxplots.iter().filter(|b| b.statistic == statistic) {
        let reference = if statistic == Statistic::CoefStat {
            let nf = cfg.n as f64;
            let sigma = sigma_from_c(cfg.n, cfg.d, b.c_sigma);
            format!("{:e}", sigma * (nf - 1.0).sqrt() / (2f64.sqrt() * nf))
        } else {
            String::new()
        };
        let s = &b.stats;
        let _ = writeln!(
            out,
            "{},{},{:e},{},{:e},{:e},{:e},{:e},{:e},{},{}",
            b.estimator.name(),
            statistic.name(),
            b.c_sigma,
            s.count,
            s.median,
            s.q25,
            s.q75,
            s.whisker_lo,
            s.whisker_hi,
            s.outliers,
            reference
        );
    }
    out
}

pub const RESULTS_FILE: &str = "results.csv";
pub const SECOND_ORDER_FILE: &str = "summary_second_order.csv";
pub const KS_FILE: &str = "summary_ks_pvalue.csv";
pub const COEFFICIENT_FILE: &str = "summary_coefficient.csv";
pub const SUMMARY_JSON_FILE: &str = "summary.json";

/// Writes the result table, the three summary CSVs and the JSON summary.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    table: &ResultTable,
    summary: &ExperimentSummary,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        (RESULTS_FILE, table.to_csv()),
        (
            SECOND_ORDER_FILE,
            summary_csv(cfg, summary, Statistic::SymResidual),
        ),
        (KS_FILE, summary_csv(cfg, summary, Statistic::KsP)),
        (
            COEFFICIENT_FILE,
            summary_csv(cfg, summary, Statistic::CoefStat),
        ),
        (SUMMARY_JSON_FILE, summary.to_json()),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
