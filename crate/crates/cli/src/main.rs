//! `sigppde` command-line front end.
//!
//! Every subcommand reads an optional JSON [`ExperimentConfig`], writes its
//! artifacts under `--out-dir` and exits with 0 on success, 2 on invalid
//! input and 3 on numerical failure.

use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sigppde::experiments::{
    cross_validate, oracle_suite, run_bergomi, run_fbm_payoffs, ExperimentConfig, ExperimentKind,
    MetricsReport,
};
use sigppde::goursat;
use sigppde::paths::Path;
use sigppde::static_kernels::{a_fields, Lift};
use sigppde::Error;

#[derive(Parser)]
#[command(
    name = "sigppde",
    version,
    about = "Signature-kernel solver for path-dependent PDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to SIGPPDE_THREADS, then rayon's default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Also write the series behind the recovery plots.
    #[arg(long, global = true)]
    emit_plot_data: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Signature kernel of two path CSVs and, given directions, its derivatives.
    KernelEval(KernelEvalArgs),
    /// fBM heat-equation experiment against the analytic prices.
    SolveFbm,
    /// Rough Bergomi experiment against Monte Carlo prices.
    SolveBergomi,
    /// 5-fold cross-validation over the configuration's `cv_grid`.
    CrossValidate,
    /// Goursat solver against the truncated-signature oracle.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct KernelEvalArgs {
    gamma: PathBuf,
    tau: PathBuf,
    /// First direction (perturbs the first path).
    #[arg(long)]
    eta: Option<PathBuf>,
    /// Second direction; defaults to `--eta`.
    #[arg(long)]
    etabar: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "identity")]
    lift: LiftArg,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 2)]
    dyadic_order: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum LiftArg {
    Identity,
    Rbf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 2)]
    dyadic_order: u32,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_)
        | Error::ShapeMismatch(_)
        | Error::Json(_)
        | Error::Parse(_)
        | Error::Io(_) => 2,
        Error::Numerical(_)
        | Error::NonFinite { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::NoConvergence { .. } => 3,
    }
}

fn load_config(common: &Common) -> sigppde::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads(common: &Common) -> sigppde::Result<Option<usize>> {
    if let Some(n) = common.threads {
        return Ok(Some(n));
    }
    match std::env::var("SIGPPDE_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::InvalidArgument(format!("SIGPPDE_THREADS must be an integer, got {v:?}"))
        }),
        Err(_) => Ok(None),
    }
}

fn write(path: impl AsRef<FsPath>, text: &str) -> sigppde::Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_report(
    dir: &FsPath,
    stem: &str,
    report: &MetricsReport,
    plot: bool,
) -> sigppde::Result<()> {
    let suffix = if stem.is_empty() {
        String::new()
    } else {
        format!("_{stem}")
    };
    write(
        dir.join(format!("metrics{suffix}.json")),
        &serde_json::to_string_pretty(report)?,
    )?;
    write(dir.join(format!("points{suffix}.csv")), &report.to_csv())?;
    if plot {
        let plots = dir.join("plot");
        fs::create_dir_all(&plots)?;
        write(
            plots.join(format!("recovery{suffix}.csv")),
            &report.plot_csv(),
        )?;
    }
    println!(
        "{:<10} mse {:.4e}  mae {:.4e}  max {:.4e}  ({} points)",
        report.payoff.label(),
        report.mse,
        report.mae,
        report.max_abs_error,
        report.rows.len()
    );
    Ok(())
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn solve_fbm(common: &Common, mut cfg: ExperimentConfig) -> sigppde::Result<()> {
    cfg.kind = ExperimentKind::Fbm;
    let mut payoffs = vec![cfg.payoff];
    payoffs.extend(cfg.extra_payoffs.iter().copied());
    let reports = run_fbm_payoffs(&cfg, &payoffs)?;
    for (k, report) in reports.iter().enumerate() {
        let stem = if k == 0 {
            String::new()
        } else {
            slug(&report.payoff.label())
        };
        write_report(&common.out_dir, &stem, report, common.emit_plot_data)?;
    }
    Ok(())
}

fn solve_bergomi(common: &Common, mut cfg: ExperimentConfig) -> sigppde::Result<()> {
    cfg.kind = ExperimentKind::Bergomi;
    let report = run_bergomi(&cfg)?;
    write_report(&common.out_dir, "", &report, common.emit_plot_data)
}

fn run_cross_validation(common: &Common, cfg: ExperimentConfig) -> sigppde::Result<()> {
    let (chosen, scores) = cross_validate(&cfg, &cfg.cv_grid)?;
    let out = json!({ "chosen": chosen, "grid": cfg.cv_grid, "scores": scores });
    write(
        common.out_dir.join("cv.json"),
        &serde_json::to_string_pretty(&out)?,
    )?;
    println!("chosen bandwidths: {}", serde_json::to_string(&chosen)?);
    Ok(())
}

fn kernel_eval(common: &Common, args: &KernelEvalArgs) -> sigppde::Result<()> {
    let gamma = Path::read_csv(&args.gamma)?;
    let tau = Path::read_csv(&args.tau)?;
    let lift = match args.lift {
        LiftArg::Identity => Lift::Identity,
        LiftArg::Rbf => Lift::Rbf { sigma: args.sigma },
    };
    let zero = Path::zeros(*gamma.grid(), gamma.channels());
    let eta = match &args.eta {
        Some(p) => Path::read_csv(p)?,
        None => zero.clone(),
    };
    let etabar = match &args.etabar {
        Some(p) => Path::read_csv(p)?,
        None => eta.clone(),
    };
    let fields = a_fields(&gamma, &tau, &eta, &etabar, &lift)?;
    let sol = goursat::solve(&gamma, &tau, &eta, &etabar, &fields, args.dyadic_order)?;
    let [k, d_eta, d_etabar, d_eta_etabar] = sol.corner();
    let out = json!({
        "kernel": k,
        "d_eta": d_eta,
        "d_etabar": d_etabar,
        "d_eta_etabar": d_eta_etabar,
        "dyadic_order": args.dyadic_order,
    });
    let text = serde_json::to_string_pretty(&out)?;
    write(common.out_dir.join("kernel.json"), &text)?;
    if common.emit_plot_data {
        write(common.out_dir.join("surfaces.csv"), &sol.to_csv())?;
    }
    println!("{text}");
    Ok(())
}

fn oracle_check(common: &Common, cfg: &ExperimentConfig, args: &OracleArgs) -> sigppde::Result<()> {
    let report = oracle_suite(args.instances, cfg.seed, args.dyadic_order)?;
    write(
        common.out_dir.join("oracle.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    let checks = [
        ("bessel kernel", report.bessel_error[0], 1e-4),
        ("bessel first derivative", report.bessel_error[1], 1e-3),
        ("bessel second derivative", report.bessel_error[2], 1e-2),
        ("kernel vs truncated signature", report.kernel_error, 1e-3),
        (
            "first derivative vs finite differences",
            report.first_error,
            1e-3,
        ),
        (
            "second derivative vs finite differences",
            report.second_error,
            1e-2,
        ),
    ];
    let mut ok = true;
    for (name, err, tol) in checks {
        let pass = err <= tol;
        ok &= pass;
        println!(
            "{} {name}: {err:.3e} (tol {tol:.0e})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    let bounds = report.signature_bound_violations + report.kernel_bound_violations;
    ok &= bounds == 0;
    println!(
        "{} norm bounds: {bounds} violations",
        if bounds == 0 { "PASS" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Numerical("oracle checks failed".into()))
    }
}

fn run(cli: &Cli) -> sigppde::Result<()> {
    let common = &cli.common;
    let cfg = load_config(common)?;
    if let Some(n) = threads(common)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&common.out_dir)?;
    let start = Instant::now();
    let name = match &cli.command {
        Command::KernelEval(args) => {
            kernel_eval(common, args)?;
            "kernel-eval"
        }
        Command::SolveFbm => {
            solve_fbm(common, cfg)?;
            "solve-fbm"
        }
        Command::SolveBergomi => {
            solve_bergomi(common, cfg)?;
            "solve-bergomi"
        }
        Command::CrossValidate => {
            run_cross_validation(common, cfg)?;
            "cross-validate"
        }
        Command::OracleCheck(args) => {
            oracle_check(common, &cfg, args)?;
            "oracle-check"
        }
    };
    let timing = json!({
        "command": name,
        "runtime_ms": start.elapsed().as_millis() as u64,
        "threads": rayon::current_num_threads(),
    });
    write(
        common.out_dir.join("timing.json"),
        &serde_json::to_string_pretty(&timing)?,
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
