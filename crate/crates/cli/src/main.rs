//! `orthosync` command-line tool: problem generation, estimation,
//! uncertainty quantification and experiment sweeps.
//!
//! Exit codes: 0 success, 1 partial or statistical failure, 2 usage or I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orthosync::estimators::{
    gpm_estimate, spectral_estimate, GpmOptions, GPM_MAX_ITERS, KKT_TOLERANCE,
};
use orthosync::format::{
    encode_problem, encode_stack, mle_metadata, problem_to_text, read_problem, read_stack,
    spectral_metadata, stack_to_text, write_kv,
};
use orthosync::harness::{analyze, run_experiment, seed_header, write_outputs, ExperimentConfig};
use orthosync::model::{
    frobenius_block_distance, generate_problem, sample_ground_truth, sigma_from_c, snr,
    snr_threshold,
};
use orthosync::uq::{rows_to_csv, uq_trial, KsSigma, DEFAULT_C0};

/// Smallest fraction of successful trials for which `experiment` exits 0.
const MIN_SUCCESS_FRACTION: f64 = 0.9;

#[derive(Parser, Debug)]
#[command(
    name = "orthosync",
    version,
    about = "Orthogonal group synchronization toolkit"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a ground truth and a noisy observation.
    Generate(GenerateArgs),
    /// Run the spectral estimator or the generalized power method.
    Estimate(EstimateArgs),
    /// Expansion statistics, confidence regions and KS tests of an estimate.
    Uq(UqArgs),
    /// Monte Carlo sweep over a grid of noise levels.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    /// Noise level sigma.
    #[arg(
        long,
        allow_negative_numbers = true,
        conflicts_with = "c_sigma",
        required_unless_present = "c_sigma"
    )]
    sigma: Option<f64>,
    /// Noise level as C_sigma, with sigma = C_sigma sqrt(n/d).
    #[arg(long, allow_negative_numbers = true)]
    c_sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write the lossless text layout instead of binary.
    #[arg(long)]
    text: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Spectral,
    Mle,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Problem file (binary or text).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "mle")]
    method: Method,
    /// Estimate output file.
    #[arg(long)]
    out: PathBuf,
    /// Metadata record; defaults to `<out>.meta`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the estimate in the binary layout instead of text.
    #[arg(long)]
    binary: bool,
    #[arg(long, default_value_t = GPM_MAX_ITERS)]
    max_iters: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KsNorm {
    True,
    Estimated,
}

#[derive(Args, Debug)]
struct UqArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_C0)]
    c0: f64,
    /// Per-block CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Noise level used to standardize the KS entries.
    #[arg(long, value_enum, default_value = "true")]
    ks_sigma: KsNorm,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// n = 800, d = 5, grid 0.05..0.5, one trial per point.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Comma-separated C_sigma values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    grid: Option<Vec<f64>>,
    /// Comma-separated estimators: mle, spectral.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    c0: Option<f64>,
    /// Skip the per-block Newton analysis.
    #[arg(long)]
    no_newton: bool,
}

/// Usage or I/O failure, reported with exit code 2.
struct Failure(String);

fn usage(message: impl Into<String>) -> Failure {
    Failure(message.into())
}

impl From<orthosync::Error> for Failure {
    fn from(e: orthosync::Error) -> Self {
        usage(e.to_string())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, body: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), Failure> {
    let sigma = match (a.sigma, a.c_sigma) {
        (Some(s), _) => s,
        (None, Some(c)) => sigma_from_c(a.n, a.d, c),
        (None, None) => return Err(usage("one of --sigma or --c-sigma is required")),
    };
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(usage(format!(
            "sigma must be finite and nonnegative, got {sigma}"
        )));
    }
    let truth = sample_ground_truth(a.n, a.d, a.seed)?;
    let problem = generate_problem(&truth, sigma, a.seed)?;
    let body = if a.text {
        format!("{}\n{}", seed_header(a.seed), problem_to_text(&problem)).into_bytes()
    } else {
        encode_problem(&problem)
    };
    write_file(&a.out, &body)?;
    let threshold = snr_threshold(a.n, a.d);
    let ratio = if sigma > 0.0 {
        snr(a.n, a.d, sigma)?
    } else {
        f64::INFINITY
    };
    println!(
        "n={} d={} sigma={sigma} seed={} snr={ratio}",
        a.n, a.d, a.seed
    );
    if ratio < threshold {
        println!("warning: SNR {ratio:.3} is below sqrt(d) + sqrt(log n) = {threshold:.3}; the asymptotic theory may not apply");
    }
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<(), Failure> {
    if a.max_iters == 0 {
        return Err(usage("--max-iters must be at least 1"));
    }
    let problem = read_problem(&read_file(&a.input)?)?;
    let spec = spectral_estimate(&problem)?;
    let (estimate, mut meta) = match a.method {
        Method::Spectral => (spec.z_eig.clone(), spectral_metadata(&spec)),
        Method::Mle => {
            let opts = GpmOptions {
                max_iters: a.max_iters,
                kkt_tol: KKT_TOLERANCE,
            };
            let mle = gpm_estimate(&problem.observation, &spec.z_eig, opts)?;
            if !mle.certified {
                log::warn!("GPM solution is not certified by the KKT check");
            }
            let meta = mle_metadata(&spec, &mle);
            (mle.z_hat, meta)
        }
    };
    let (dist, _) = frobenius_block_distance(&estimate, &problem.truth)?;
    meta.insert(0, ("seed".into(), problem.seed.to_string()));
    meta.push(("distance_to_truth".into(), format!("{dist:e}")));
    let body = if a.binary {
        encode_stack(&estimate)
    } else {
        format!(
            "{}\n{}",
            seed_header(problem.seed),
            stack_to_text(&estimate)
        )
        .into_bytes()
    };
    write_file(&a.out, &body)?;
    let report = a.report.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".meta");
        PathBuf::from(p)
    });
    let record = write_kv(&meta)?;
    write_file(
        &report,
        format!("{}\n{record}", seed_header(problem.seed)).as_bytes(),
    )?;
    print!("{record}");
    Ok(())
}

fn cmd_uq(a: &UqArgs) -> Result<(), Failure> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage(format!(
            "--alpha must lie in (0, 1), got {}",
            a.alpha
        )));
    }
    if !(a.c0.is_finite() && a.c0 >= 0.0) {
        return Err(usage(format!(
            "--c0 must be finite and nonnegative, got {}",
            a.c0
        )));
    }
    let problem = read_problem(&read_file(&a.problem)?)?;
    let estimate = read_stack(&read_file(&a.estimate)?)?;
    if (estimate.n(), estimate.d()) != (problem.n(), problem.d()) {
        return Err(usage(format!(
            "estimate is ({}, {}) but problem is ({}, {})",
            estimate.n(),
            estimate.d(),
            problem.n(),
            problem.d()
        )));
    }
    if !estimate.is_orthogonal() {
        return Err(usage("estimate blocks are not orthogonal"));
    }
    let ks_sigma = match a.ks_sigma {
        KsNorm::True => KsSigma::True,
        KsNorm::Estimated => KsSigma::Estimated,
    };
    let t = uq_trial(&problem, &estimate, 0, a.alpha, a.c0, ks_sigma)?;
    write_file(
        &a.out,
        format!("{}\n{}", seed_header(problem.seed), rows_to_csv(&t.rows)).as_bytes(),
    )?;
    let covered = t.rows.iter().filter(|r| r.covered).count();
    let ks: Vec<f64> = t
        .rows
        .iter()
        .filter_map(|r| r.ks.map(|k| k.p_value))
        .collect();
    let mut record = vec![
        ("seed".to_string(), problem.seed.to_string()),
        ("alpha".into(), a.alpha.to_string()),
        ("c0".into(), a.c0.to_string()),
        ("sigma_hat".into(), format!("{:e}", t.region.sigma_hat)),
        ("c_value".into(), format!("{:e}", t.region.c_value)),
        ("radius".into(), format!("{:e}", t.region.radius)),
        (
            "pair_c_value".into(),
            format!("{:e}", t.region.pair_c_value),
        ),
        ("pair_radius".into(), format!("{:e}", t.region.pair_radius)),
        (
            "blocks_covered".into(),
            format!("{covered}/{}", t.rows.len()),
        ),
    ];
    if !ks.is_empty() {
        let rejected = ks.iter().filter(|p| **p < 0.05).count();
        record.push((
            "ks_rejections_at_0.05".into(),
            format!("{rejected}/{}", ks.len()),
        ));
    }
    print!("{}", write_kv(&record)?);
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<ExitCode, Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text =
                String::from_utf8(read_file(path)?).map_err(|_| usage("config is not UTF-8"))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| usage(format!("invalid config: {e}")))?
        }
        None => ExperimentConfig::desk(),
    };
    if a.paper_scale {
        let full = ExperimentConfig::paper_scale();
        cfg.n = full.n;
        cfg.d = full.d;
        cfg.trials = full.trials;
        cfg.sigma_grid = full.sigma_grid;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.workers {
        cfg.workers = Some(v);
    }
    if let Some(v) = a.trials {
        cfg.trials = v;
    }
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.d {
        cfg.d = v;
    }
    if let Some(v) = &a.grid {
        cfg.sigma_grid = v.clone();
    }
    if let Some(v) = &a.estimators {
        cfg.estimators = v.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    }
    if let Some(v) = a.c0 {
        cfg.c0 = v;
    }
    if a.no_newton {
        cfg.newton = false;
    }
    if let Some(dir) = &a.out_dir {
        cfg.output_dir = Some(dir.clone());
    }
    cfg.validate()?;
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| usage("an output directory is required (--out-dir or output_dir)"))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;

    let table = run_experiment(&cfg)?;
    let summary = analyze(&cfg, &table);
    write_outputs(&dir, &cfg, &table, &summary)?;
    for f in &summary.fits {
        match &f.fit {
            Ok(fit) => println!(
                "{} {} slope={:.3} intercept={:.3} r2={:.3}",
                f.estimator.name(),
                f.statistic.name(),
                fit.slope,
                fit.intercept,
                fit.r2
            ),
            Err(e) => println!(
                "{} {} fit unavailable: {e}",
                f.estimator.name(),
                f.statistic.name()
            ),
        }
    }
    for s in summary.soft_checks.iter().filter(|s| !s.passed) {
        println!("soft check `{}` not met: {}", s.name, s.detail);
    }
    println!(
        "trials: {} of {} succeeded; digest {}",
        summary.trials_total - summary.trials_failed,
        summary.trials_total,
        summary.digest
    );
    let ok = (summary.trials_total - summary.trials_failed) as f64
        >= MIN_SUCCESS_FRACTION * summary.trials_total as f64;
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| ExitCode::SUCCESS),
        Command::Estimate(a) => cmd_estimate(a).map(|_| ExitCode::SUCCESS),
        Command::Uq(a) => cmd_uq(a).map(|_| ExitCode::SUCCESS),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure(message)) => {
            eprintln!("error: {message}");
            eprintln!("run `orthosync --help` for usage");
            ExitCode::from(2)
        }
    }
}
