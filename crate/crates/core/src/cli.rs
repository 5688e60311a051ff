//! Command-line front end. [`run`] parses arguments and returns the exit
//! status; the binary only sets up logging around it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::drift::{DriftFamily, SolverConfig};
use crate::io::{self, IoError, RunConfig};
use crate::optimize::{fit_alasso, fit_mle, fit_two_step, DriftSpec, FitConfig, FitMethod, FitResult};
use crate::report::{self, StudyConfig};
use crate::simulate::{simulate_panel, simulate_terminal, PanelSchedule, SimDesign};
use crate::{forecast, par};

pub const EXIT_SUCCESS: u8 = 0;
pub const EXIT_DATA: u8 = 1;
pub const EXIT_CONVERGENCE: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "coxflow", version, about = "Cox regression with drift-driven temporal covariates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate terminal and panel datasets.
    Simulate(SimulateArgs),
    /// Unpenalized full-information fit of a terminal dataset.
    Fit(FitArgs),
    /// Adaptive LASSO fit of a terminal dataset.
    FitLasso(FitArgs),
    /// Two-step fit of a panel dataset.
    FitTwostep(FitArgs),
    /// Long-term survival rates from a saved fit.
    Forecast(ForecastArgs),
    /// Replicated simulate-and-fit study.
    Study(StudyArgs),
    /// Cumulative baseline hazard of a saved fit on a grid.
    HazardCurve(CurveArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Design {
    Example1,
    UnitExponential,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    design: Option<Design>,
    #[arg(long)]
    n: Option<usize>,
    /// Covariate dimension of the unit-exponential design.
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// Noise on the non-terminal panel observations.
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    family: Option<DriftFamily>,
    /// Comma-separated 0-based coordinates the drift acts on.
    #[arg(long, value_delimiter = ',')]
    temporal: Option<Vec<usize>>,
    /// Euler steps per trajectory.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    zero_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    /// Saved fit report.
    #[arg(long)]
    fit: PathBuf,
    /// CSV with columns id, t, t_prime, z_1 .. z_p.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    design: Option<Design>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    method: Option<FitMethod>,
    #[arg(long)]
    family: Option<DriftFamily>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    zero_threshold: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Reuse the base seed in every replication.
    #[arg(long)]
    identical_seeds: bool,
}

#[derive(Args, Debug)]
struct CurveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    fit: PathBuf,
    /// Upper end of the grid; defaults to the last knot.
    #[arg(long)]
    upto: Option<f64>,
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Adds the true cumulative hazard of a simulation design.
    #[arg(long, value_enum)]
    design: Option<Design>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    NotConverged(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    match &common.config {
        Some(path) => Ok(RunConfig::load(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn solver(steps: Option<usize>, cfg: &RunConfig) -> Result<SolverConfig, Failure> {
    let steps = steps.or(cfg.steps).unwrap_or(SolverConfig::default().steps_per_trajectory);
    if steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    Ok(SolverConfig {
        steps_per_trajectory: steps,
        ..SolverConfig::default()
    })
}

fn parse_design(name: &str) -> Result<Design, Failure> {
    Design::from_str(name, true).map_err(|_| Failure::Usage(format!("unknown design `{name}`")))
}

fn make_design(design: Design, n: usize, p: usize, seed: u64) -> SimDesign {
    match design {
        Design::Example1 => SimDesign::example1(n, seed),
        Design::UnitExponential => SimDesign::unit_exponential(n, p, seed),
    }
}

fn fit_config(cfg: &RunConfig, seed: Option<u64>, lambda: Option<f64>, zero: Option<f64>) -> Result<FitConfig, Failure> {
    let mut fit = cfg.fit.clone().unwrap_or_default();
    if let Some(seed) = seed.or(cfg.seed) {
        fit.seed = seed;
    }
    if lambda.is_some() {
        fit.lambda_override = lambda;
    }
    if let Some(z) = zero {
        fit.zero_threshold = z;
    }
    fit.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(fit)
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let study = cfg.study.clone().unwrap_or_default();
    let design = match (args.design, &study.design) {
        (Some(d), _) => d,
        (None, Some(name)) => parse_design(name)?,
        (None, None) => return Err(Failure::Usage("--design is required".into())),
    };
    let n = args.n.or(study.n).ok_or_else(|| Failure::Usage("--n is required".into()))?;
    let seed = args.common.seed.or(cfg.seed).unwrap_or(0);
    let design = make_design(design, n, args.p, seed);
    let schedule = PanelSchedule {
        noise_sd: args.noise_sd.or(study.noise_sd).unwrap_or(0.0),
        ..PanelSchedule::default()
    };
    let terminal = simulate_terminal(&design).map_err(data_err)?;
    let panel = simulate_panel(&design, &schedule).map_err(data_err)?;
    let dir = out_dir(&args.common, &cfg);
    ensure_dir(&dir)?;
    io::write_terminal_csv(dir.join("terminal.csv"), &terminal)?;
    io::write_panel_csv(dir.join("panel.csv"), &panel)?;
    let mean_t = terminal.iter().map(|r| r.event_time).sum::<f64>() / n as f64;
    println!("simulated {n} subjects (p = {}, seed {seed})", design.p());
    println!("mean event time: {mean_t:.4}");
    println!("wrote {}", dir.join("terminal.csv").display());
    println!("wrote {}", dir.join("panel.csv").display());
    Ok(())
}

fn print_fit(fit: &FitResult) {
    println!("method: {}", fit.method);
    println!("converged: {} ({} iterations)", fit.converged, fit.iterations);
    println!("log-likelihood: {:.6}", fit.loglik);
    if let Some(l) = fit.lambda {
        println!("lambda: {l:.6}");
    }
    let a: Vec<String> = fit.a_hat().iter().map(|v| format!("{v:.4}")).collect();
    let b: Vec<String> = fit.b_hat.iter().map(|v| format!("{v:.4}")).collect();
    println!("a_hat: [{}]", a.join(", "));
    println!("b_hat: [{}]", b.join(", "));
    println!("hazard steps: {}", fit.hazard_hat.steps());
}

fn fit(args: FitArgs, method: FitMethod) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let data_path = args
        .data
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Failure::Usage("--data is required".into()))?;
    let family = args.family.or(cfg.family).unwrap_or(DriftFamily::Constant);
    let spec = match args.temporal.clone().or_else(|| cfg.temporal.clone()) {
        Some(t) => DriftSpec::with_temporal(family, t),
        None => DriftSpec::new(family),
    };
    let solver = solver(args.steps, &cfg)?;
    let fit_cfg = fit_config(&cfg, args.common.seed, args.lambda, args.zero_threshold)?;
    let result = match method {
        FitMethod::TwoStep => {
            let data = io::load_panel_csv(&data_path)?;
            let panel = data.panel().expect("panel dataset");
            fit_two_step(panel, &spec, &fit_cfg, &solver)
        }
        FitMethod::Mle | FitMethod::Alasso => {
            let data = io::load_terminal_csv(&data_path)?;
            let records = data.terminal();
            if method == FitMethod::Mle {
                fit_mle(&records, &spec, &fit_cfg, &solver)
            } else {
                fit_alasso(&records, &spec, &fit_cfg, &solver)
            }
        }
    }
    .map_err(data_err)?;
    let dir = out_dir(&args.common, &cfg);
    ensure_dir(&dir)?;
    io::write_fit_report(dir.join("fit.report"), &result)?;
    io::write_hazard_csv(dir.join("hazard.csv"), &result.hazard_hat)?;
    print_fit(&result);
    println!("wrote {}", dir.join("fit.report").display());
    println!("wrote {}", dir.join("hazard.csv").display());
    if !result.converged {
        return Err(Failure::NotConverged("optimizer stopped before convergence".into()));
    }
    Ok(())
}

fn run_forecast(args: ForecastArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let fit = io::load_fit_report(&args.fit)?;
    let queries = io::load_queries_csv(&args.queries)?;
    let solver = solver(args.steps, &cfg)?;
    let forecasts = forecast::ltsr_batch(&fit, &queries, &solver).map_err(data_err)?;
    let dir = out_dir(&args.common, &cfg);
    ensure_dir(&dir)?;
    let path = dir.join("forecasts.csv");
    io::write_forecasts_csv(&path, &queries, &forecasts)?;
    let extrapolated = forecasts.iter().filter(|f| f.extrapolated).count();
    println!("{} forecasts, {extrapolated} beyond the last hazard knot", forecasts.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn study(args: StudyArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let section = cfg.study.clone().unwrap_or_default();
    let design = match (args.design, &section.design) {
        (Some(d), _) => d,
        (None, Some(name)) => parse_design(name)?,
        (None, None) => Design::Example1,
    };
    let n = args.n.or(section.n).unwrap_or(400);
    let reps = args.reps.or(section.reps).unwrap_or(100);
    let method = args.method.or(section.method).unwrap_or(FitMethod::Alasso);
    let seed = args.common.seed.or(cfg.seed).unwrap_or(0);
    let family = args.family.or(cfg.family).unwrap_or(DriftFamily::Constant);
    let mut study = StudyConfig::new(make_design(design, n, 3, seed), reps, method);
    study.family = DriftSpec::new(family);
    study.solver = solver(args.steps, &cfg)?;
    study.fit = fit_config(&cfg, None, args.lambda, args.zero_threshold)?;
    study.schedule.noise_sd = args.noise_sd.or(section.noise_sd).unwrap_or(0.0);
    study.identical_seeds = args.identical_seeds || section.identical_seeds.unwrap_or(false);
    info!("study: {reps} replications of n = {n}, method {method}");
    let result = report::run_study(&study).map_err(Failure::Usage)?;
    let dir = out_dir(&args.common, &cfg);
    report::write_study(&dir, &result, None)?;
    print!("{}", report::study_text(&result, None));
    println!("\nwrote {}", dir.display());
    if result.failures > 0 || result.non_converged > 0 {
        return Err(Failure::NotConverged(format!(
            "{} failed and {} non-converged replications",
            result.failures, result.non_converged
        )));
    }
    Ok(())
}

fn hazard_curve(args: CurveArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let fit = io::load_fit_report(&args.fit)?;
    let upto = args.upto.unwrap_or_else(|| fit.hazard_hat.last_knot());
    if !(upto > 0.0 && upto.is_finite()) || args.points < 2 {
        return Err(Failure::Usage("--upto must be positive and --points at least 2".into()));
    }
    let truth = args.design.map(|d| make_design(d, 1, fit.drift.p(), 0).baseline);
    let rows = report::hazard_curve(&fit, truth.as_ref(), &report::uniform_grid(upto, args.points));
    let dir = out_dir(&args.common, &cfg);
    ensure_dir(&dir)?;
    let path = dir.join("hazard_curve.csv");
    std::fs::write(&path, report::hazard_curve_csv(&rows)).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    println!("{} grid points on [0, {upto}]", rows.len());
    println!("wrote {}", path.display());
    Ok(())
}

/// Runs one command line (program name first) and returns the exit status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_SUCCESS };
        }
    };
    let threads = std::env::var("COXFLOW_THREADS").ok().and_then(|v| v.parse().ok());
    par::init_threads(threads);
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a, FitMethod::Mle),
        Command::FitLasso(a) => fit(a, FitMethod::Alasso),
        Command::FitTwostep(a) => fit(a, FitMethod::TwoStep),
        Command::Forecast(a) => run_forecast(a),
        Command::Study(a) => study(a),
        Command::HazardCurve(a) => hazard_curve(a),
    };
    match outcome {
        Ok(()) => EXIT_SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `coxflow --help` for usage");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            EXIT_DATA
        }
        Err(Failure::NotConverged(m)) => {
            eprintln!("warning: {m}; outputs were written");
            EXIT_CONVERGENCE
        }
    }
}
