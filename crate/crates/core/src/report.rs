//! Replication studies: simulate, fit, and summarize coefficient bias, variable
//! selection and cumulative hazard recovery.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};

use crate::drift::SolverConfig;
use crate::io::{fmt_f64, IoError};
use crate::optimize::{
    fit_alasso_from_pilot, fit_mle, fit_two_step, DriftSpec, FitConfig, FitMethod, FitResult,
};
use crate::par;
use crate::simulate::{simulate_panel, simulate_terminal, Baseline, PanelSchedule, SimDesign};

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Design template; `seed` is the base seed of the study.
    pub design: SimDesign,
    pub replications: usize,
    pub method: FitMethod,
    pub family: DriftSpec,
    pub fit: FitConfig,
    pub solver: SolverConfig,
    /// Panel schedule for the two-step method.
    pub schedule: PanelSchedule,
    /// Every replication reuses the base seed.
    pub identical_seeds: bool,
    /// Points of the per-replication hazard curve on `[0, q90]`.
    pub curve_points: usize,
}

impl StudyConfig {
    pub fn new(design: SimDesign, replications: usize, method: FitMethod) -> Self {
        Self {
            design,
            replications,
            method,
            family: DriftSpec::new(crate::drift::DriftFamily::Constant),
            fit: FitConfig::default(),
            solver: SolverConfig::default(),
            schedule: PanelSchedule::default(),
            identical_seeds: false,
            curve_points: 41,
        }
    }
}

/// SplitMix64 finalizer: decorrelated per-replication seeds.
pub fn replication_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub fit: Result<FitResult, String>,
    /// Unpenalized pilot of an adaptive LASSO replication.
    pub pilot: Option<FitResult>,
    /// Empirical 90th percentile of the simulated event times.
    pub q90: f64,
    /// `max |Lambda_hat - Lambda_0|` over `[0, q90]`.
    pub hazard_error: Option<f64>,
    pub curve: Vec<HazardRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardRow {
    pub t: f64,
    pub estimate: f64,
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSummary {
    pub mean: Vec<f64>,
    pub bias: Vec<f64>,
    pub std: Vec<f64>,
}

/// Selection criteria averaged over replications.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionMetrics {
    /// Mean number of true zeros estimated as zero.
    pub c: f64,
    /// Mean number of true non-zeros estimated as zero.
    pub ic: f64,
    pub u_fit: f64,
    pub c_fit: f64,
    pub o_fit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub method: FitMethod,
    pub n: usize,
    pub b0: Vec<f64>,
    pub replications: Vec<Replication>,
    pub coefficients: CoefficientSummary,
    /// Summary of the pilot fits (adaptive LASSO studies).
    pub pilot_coefficients: Option<CoefficientSummary>,
    pub selection: SelectionMetrics,
    pub failures: usize,
    pub non_converged: usize,
    /// `max_k |a_hat_k - a0_k|` per successful replication.
    pub drift_errors: Vec<f64>,
}

/// Rows `(t, Lambda_hat(t), Lambda_0(t))`.
pub fn hazard_curve(fit: &FitResult, truth: Option<&Baseline>, grid: &[f64]) -> Vec<HazardRow> {
    grid.iter()
        .map(|&t| HazardRow {
            t,
            estimate: fit.hazard_hat.cumulative(t),
            truth: truth.map(|b| b.cumulative(t)),
        })
        .collect()
}

pub fn hazard_curve_csv(rows: &[HazardRow]) -> String {
    let mut out = String::from("t,cumulative_estimate,cumulative_true\n");
    for r in rows {
        let truth = r.truth.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", fmt_f64(r.t), fmt_f64(r.estimate), truth);
    }
    out
}

/// Empirical quantile (type 7).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Uniform grid of `points` values on `[0, upto]`.
pub fn uniform_grid(upto: f64, points: usize) -> Vec<f64> {
    let m = points.max(2) - 1;
    (0..=m).map(|k| upto * k as f64 / m as f64).collect()
}

pub fn selection_metrics(masks: &[Vec<bool>], b0: &[f64]) -> SelectionMetrics {
    let reps = masks.len().max(1) as f64;
    let support: Vec<bool> = b0.iter().map(|v| *v != 0.0).collect();
    let mut m = SelectionMetrics {
        c: 0.0,
        ic: 0.0,
        u_fit: 0.0,
        c_fit: 0.0,
        o_fit: 0.0,
    };
    for mask in masks {
        let zeroed_true = support.iter().zip(mask).filter(|(s, m)| !**s && !**m).count();
        let zeroed_signal = support.iter().zip(mask).filter(|(s, m)| **s && !**m).count();
        let extra = support.iter().zip(mask).filter(|(s, m)| !**s && **m).count();
        m.c += zeroed_true as f64;
        m.ic += zeroed_signal as f64;
        if zeroed_signal > 0 {
            m.u_fit += 1.0;
        } else if extra == 0 {
            m.c_fit += 1.0;
        } else {
            m.o_fit += 1.0;
        }
    }
    m.c /= reps;
    m.ic /= reps;
    m.u_fit /= reps;
    m.c_fit /= reps;
    m.o_fit /= reps;
    m
}

fn summarize(fits: &[&FitResult], b0: &[f64]) -> CoefficientSummary {
    let p = b0.len();
    let k = fits.len() as f64;
    let mut mean = vec![0.0; p];
    for f in fits {
        for (m, b) in mean.iter_mut().zip(&f.b_hat) {
            *m += b;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mut std = vec![0.0; p];
    if fits.len() > 1 {
        for f in fits {
            for ((s, b), m) in std.iter_mut().zip(&f.b_hat).zip(&mean) {
                *s += (b - m) * (b - m);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / (k - 1.0)).sqrt());
    }
    let bias = mean.iter().zip(b0).map(|(m, b)| m - b).collect();
    CoefficientSummary { mean, bias, std }
}

fn run_replication(cfg: &StudyConfig, index: usize) -> Replication {
    let seed = if cfg.identical_seeds {
        cfg.design.seed
    } else {
        replication_seed(cfg.design.seed, index)
    };
    let design = SimDesign {
        seed,
        ..cfg.design.clone()
    };
    let mut rep = Replication {
        index,
        seed,
        fit: Err(String::new()),
        pilot: None,
        q90: f64::NAN,
        hazard_error: None,
        curve: Vec::new(),
    };
    let fit_cfg = FitConfig {
        seed,
        ..cfg.fit.clone()
    };
    let outcome: Result<(FitResult, Option<FitResult>, Vec<f64>), String> = (|| {
        match cfg.method {
            FitMethod::TwoStep => {
                let panel = simulate_panel(&design, &cfg.schedule).map_err(|e| e.to_string())?;
                let times = panel.iter().map(|r| r.event_time()).collect();
                let fit = fit_two_step(&panel, &cfg.family, &fit_cfg, &cfg.solver)
                    .map_err(|e| e.to_string())?;
                Ok((fit, None, times))
            }
            FitMethod::Mle | FitMethod::Alasso => {
                let data = simulate_terminal(&design).map_err(|e| e.to_string())?;
                let times = data.iter().map(|r| r.event_time).collect();
                let mle = fit_mle(&data, &cfg.family, &fit_cfg, &cfg.solver).map_err(|e| e.to_string())?;
                if cfg.method == FitMethod::Mle {
                    return Ok((mle, None, times));
                }
                let fit = fit_alasso_from_pilot(&data, &mle, &fit_cfg, &cfg.solver)
                    .map_err(|e| e.to_string())?;
                Ok((fit, Some(mle), times))
            }
        }
    })();
    match outcome {
        Ok((fit, pilot, times)) => {
            rep.q90 = quantile(&times, 0.9);
            rep.curve = hazard_curve(&fit, Some(&design.baseline), &uniform_grid(rep.q90, cfg.curve_points));
            rep.hazard_error = rep
                .curve
                .iter()
                .map(|r| (r.estimate - r.truth.unwrap_or(f64::NAN)).abs())
                .reduce(f64::max);
            rep.fit = Ok(fit);
            rep.pilot = pilot;
        }
        Err(e) => {
            warn!("replication {index} failed: {e}");
            rep.fit = Err(e);
        }
    }
    rep
}

/// Simulates, fits and aggregates `cfg.replications` datasets. Replications
/// run in parallel; failures are counted, not fatal.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult, String> {
    if cfg.replications < 2 {
        return Err("a study needs at least 2 replications".into());
    }
    cfg.design.validate().map_err(|e| e.to_string())?;
    cfg.fit.validate().map_err(|e| e.to_string())?;
    let replications = par::map(cfg.replications, |i| run_replication(cfg, i));
    let fits: Vec<&FitResult> = replications.iter().filter_map(|r| r.fit.as_ref().ok()).collect();
    let failures = replications.len() - fits.len();
    let non_converged = fits.iter().filter(|f| !f.converged).count();
    info!(
        "study: {} replications, {failures} failed, {non_converged} not converged",
        replications.len()
    );
    let b0 = cfg.design.b0.clone();
    let threshold = cfg.fit.zero_threshold;
    let masks: Vec<Vec<bool>> = fits
        .iter()
        .map(|f| {
            f.selection_mask
                .clone()
                .unwrap_or_else(|| f.b_hat.iter().map(|v| v.abs() > threshold).collect())
        })
        .collect();
    let pilots: Vec<&FitResult> = replications.iter().filter_map(|r| r.pilot.as_ref()).collect();
    let a0 = cfg.design.drift.params();
    let drift_errors = fits
        .iter()
        .map(|f| {
            f.a_hat()
                .iter()
                .zip(a0)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(StudyResult {
        method: cfg.method,
        n: cfg.design.n,
        coefficients: summarize(&fits, &b0),
        pilot_coefficients: (!pilots.is_empty()).then(|| summarize(&pilots, &b0)),
        selection: selection_metrics(&masks, &b0),
        b0,
        replications,
        failures,
        non_converged,
        drift_errors,
    })
}

fn coefficient_table(summary: &CoefficientSummary) -> String {
    let mut out = String::from("coefficient,mean,bias,std\n");
    for j in 0..summary.mean.len() {
        let _ = writeln!(
            out,
            "b{},{},{},{}",
            j + 1,
            fmt_f64(summary.mean[j]),
            fmt_f64(summary.bias[j]),
            fmt_f64(summary.std[j])
        );
    }
    out
}

pub fn selection_table(result: &StudyResult) -> String {
    let s = &result.selection;
    format!(
        "N,C(b0),IC(b0),U_fit,C_fit,O_fit\n{},{},{},{},{},{}\n",
        result.n,
        fmt_f64(s.c),
        fmt_f64(s.ic),
        fmt_f64(s.u_fit),
        fmt_f64(s.c_fit),
        fmt_f64(s.o_fit)
    )
}

/// Bias and standard deviation of the non-zero coefficients.
pub fn bias_std_table(result: &StudyResult) -> String {
    let summary = result
        .pilot_coefficients
        .as_ref()
        .unwrap_or(&result.coefficients);
    let mut out = String::from("N,coefficient,truth,bias,std\n");
    for (j, b) in result.b0.iter().enumerate().filter(|(_, b)| **b != 0.0) {
        let _ = writeln!(
            out,
            "{},b{},{},{},{}",
            result.n,
            j + 1,
            fmt_f64(*b),
            fmt_f64(summary.bias[j]),
            fmt_f64(summary.std[j])
        );
    }
    out
}

pub fn study_text(result: &StudyResult, note: Option<&str>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "study: method {}, n = {}, replications = {}", result.method, result.n, result.replications.len());
    if let Some(note) = note {
        let _ = writeln!(out, "note: {note}");
    }
    let _ = writeln!(out, "failed replications: {}", result.failures);
    let _ = writeln!(out, "non-converged fits: {}", result.non_converged);
    let print = |out: &mut String, title: &str, s: &CoefficientSummary| {
        let _ = writeln!(out, "\n{title}");
        let _ = writeln!(out, "{:>6} {:>10} {:>12} {:>12} {:>12}", "coef", "truth", "mean", "bias", "std");
        for j in 0..s.mean.len() {
            let _ = writeln!(
                out,
                "{:>6} {:>10.4} {:>12.6} {:>12.6} {:>12.6}",
                format!("b{}", j + 1),
                result.b0[j],
                s.mean[j],
                s.bias[j],
                s.std[j]
            );
        }
    };
    if let Some(p) = &result.pilot_coefficients {
        print(&mut out, "unpenalized pilot estimates", p);
    }
    print(&mut out, "final estimates", &result.coefficients);
    let s = &result.selection;
    let _ = writeln!(out, "\nvariable selection");
    let _ = writeln!(out, "C(b0) = {:.4}  IC(b0) = {:.4}  U_fit = {:.4}  C_fit = {:.4}  O_fit = {:.4}", s.c, s.ic, s.u_fit, s.c_fit, s.o_fit);
    if !result.drift_errors.is_empty() {
        let _ = writeln!(
            out,
            "\nmax-norm drift error: median {:.6e}, max {:.6e}",
            quantile(&result.drift_errors, 0.5),
            result.drift_errors.iter().cloned().fold(0.0, f64::max)
        );
    }
    let errors: Vec<f64> = result.replications.iter().filter_map(|r| r.hazard_error).collect();
    if !errors.is_empty() {
        let _ = writeln!(
            out,
            "cumulative hazard sup error on [0, q90]: median {:.6e}, max {:.6e}",
            quantile(&errors, 0.5),
            errors.iter().cloned().fold(0.0, f64::max)
        );
    }
    out
}

fn replications_csv(result: &StudyResult) -> String {
    let p = result.b0.len();
    let mut out = String::from("replication,seed,status,converged,loglik,q90,hazard_error");
    for j in 1..=p {
        let _ = write!(out, ",b_{j}");
    }
    out.push('\n');
    for r in &result.replications {
        match &r.fit {
            Ok(f) => {
                let _ = write!(
                    out,
                    "{},{},ok,{},{},{},{}",
                    r.index,
                    r.seed,
                    u8::from(f.converged),
                    fmt_f64(f.loglik),
                    fmt_f64(r.q90),
                    r.hazard_error.map(fmt_f64).unwrap_or_default()
                );
                for b in &f.b_hat {
                    let _ = write!(out, ",{}", fmt_f64(*b));
                }
            }
            Err(e) => {
                let _ = write!(out, "{},{},\"failed: {}\",,,,", r.index, r.seed, e.replace('"', "'"));
                for _ in 0..p {
                    out.push(',');
                }
            }
        }
        out.push('\n');
    }
    out
}

fn curves_csv(result: &StudyResult) -> String {
    let mut out = String::from("replication,t,cumulative_estimate,cumulative_true\n");
    for r in &result.replications {
        for row in &r.curve {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.index,
                fmt_f64(row.t),
                fmt_f64(row.estimate),
                row.truth.map(fmt_f64).unwrap_or_default()
            );
        }
    }
    out
}

/// Writes `study_report.txt`, `table_bias_std.csv`, `table_selection.csv`,
/// `replications.csv` and `hazard_curves.csv` into `dir`.
pub fn write_study(dir: impl AsRef<Path>, result: &StudyResult, note: Option<&str>) -> Result<(), IoError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IoError::File { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let files = [
        ("study_report.txt", study_text(result, note)),
        ("table_bias_std.csv", bias_std_table(result)),
        ("table_selection.csv", selection_table(result)),
        ("table_coefficients.csv", coefficient_table(&result.coefficients)),
        ("replications.csv", replications_csv(result)),
        ("hazard_curves.csv", curves_csv(result)),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(&path))?;
    }
    Ok(())
}
