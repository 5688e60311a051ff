//! Fitting drivers: the profiled maximum likelihood fit over `(a, b)`, its
//! adaptive LASSO variant, and the two-step panel procedure.

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{solve_g, DriftError, DriftFamily, DriftModel, SolverConfig};
use crate::hazard::StepwiseHazard;
use crate::likelihood::{
    default_lambda, LikelihoodError, LikelihoodMode, ProfiledLikelihood, TerminalRecord, MIN_PILOT,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("fit needs at least {min} subjects, got {got}")]
    TooFewRecords { min: usize, got: usize },
    #[error("objective is not finite at every starting point")]
    NonFiniteStart,
    #[error("subject `{id}` has {m} panel observations; the two-step fit needs at least 2")]
    InsufficientPanel { id: String, m: usize },
    #[error("invalid panel record `{id}`: {reason}")]
    InvalidPanel { id: String, reason: String },
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Drift(#[from] DriftError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_outer_iters: usize,
    pub gradient_eps: f64,
    pub convergence_tol: f64,
    pub multistart: usize,
    pub seed: u64,
    pub zero_threshold: f64,
    pub lambda_override: Option<f64>,
    /// Kernel width override for the initial density.
    pub bandwidth: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 200,
            gradient_eps: 1e-5,
            convergence_tol: 1e-6,
            multistart: 3,
            seed: 0,
            zero_threshold: 1e-4,
            lambda_override: None,
            bandwidth: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.max_outer_iters == 0 || self.multistart == 0 {
            return Err(OptimizeError::Config(
                "max_outer_iters and multistart must be at least 1".into(),
            ));
        }
        if !positive(self.gradient_eps) || !positive(self.convergence_tol) {
            return Err(OptimizeError::Config(
                "gradient_eps and convergence_tol must be positive".into(),
            ));
        }
        if !positive(self.zero_threshold) || self.zero_threshold >= 1e-2 {
            return Err(OptimizeError::Config(
                "zero_threshold must lie in (0, 1e-2)".into(),
            ));
        }
        if let Some(l) = self.lambda_override {
            if !positive(l) {
                return Err(OptimizeError::Config(format!("lambda must be positive, got {l}")));
            }
        }
        if let Some(h) = self.bandwidth {
            if !positive(h) {
                return Err(OptimizeError::Config(format!("bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// Drift family plus the coordinates it acts on (`None`: all of them).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub family: DriftFamily,
    #[serde(default)]
    pub temporal: Option<Vec<usize>>,
}

impl DriftSpec {
    pub fn new(family: DriftFamily) -> Self {
        Self {
            family,
            temporal: None,
        }
    }

    pub fn with_temporal(family: DriftFamily, temporal: Vec<usize>) -> Self {
        Self {
            family,
            temporal: Some(temporal),
        }
    }

    pub fn template(&self, p: usize) -> Result<DriftModel, DriftError> {
        let temporal = self.temporal.clone().unwrap_or_else(|| (0..p).collect());
        DriftModel::zeros(self.family, p, temporal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Mle,
    Alasso,
    TwoStep,
}

impl std::fmt::Display for FitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitMethod::Mle => "mle",
            FitMethod::Alasso => "alasso",
            FitMethod::TwoStep => "two-step",
        })
    }
}

impl std::str::FromStr for FitMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mle" => Ok(FitMethod::Mle),
            "alasso" | "lasso" => Ok(FitMethod::Alasso),
            "two-step" | "twostep" | "two_step" => Ok(FitMethod::TwoStep),
            other => Err(format!("unknown fit method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: FitMethod,
    /// Drift model carrying `a_hat`.
    pub drift: DriftModel,
    pub b_hat: Vec<f64>,
    pub hazard_hat: StepwiseHazard,
    /// Full (or, for the two-step fit, conditional) log-likelihood at the estimate.
    pub loglik: f64,
    /// Value of the maximized objective (penalized for the LASSO fit).
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub selection_mask: Option<Vec<bool>>,
    pub pilot_b: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    /// Objective after every accepted outer iteration.
    pub history: Vec<f64>,
}

impl FitResult {
    pub fn a_hat(&self) -> &[f64] {
        self.drift.params()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelObservation {
    pub time: f64,
    pub z: Vec<f64>,
}

/// Longitudinal observations of one subject; the last one is at the event.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub id: String,
    pub observations: Vec<PanelObservation>,
}

impl PanelRecord {
    pub fn new(id: impl Into<String>, observations: Vec<PanelObservation>) -> Result<Self, OptimizeError> {
        let id = id.into();
        let invalid = |reason: &str| OptimizeError::InvalidPanel {
            id: id.clone(),
            reason: reason.to_string(),
        };
        let last = observations.last().ok_or_else(|| invalid("no observations"))?;
        let p = last.z.len();
        if !(last.time > 0.0 && last.time.is_finite()) {
            return Err(invalid("event time must be positive and finite"));
        }
        for (k, obs) in observations.iter().enumerate() {
            if obs.z.len() != p {
                return Err(invalid("inconsistent covariate dimension"));
            }
            if !obs.time.is_finite() || obs.time < 0.0 || obs.z.iter().any(|v| !v.is_finite()) {
                return Err(invalid("non-finite or negative entry"));
            }
            if k > 0 && obs.time <= observations[k - 1].time {
                return Err(invalid("observation times must increase strictly"));
            }
        }
        Ok(Self { id, observations })
    }

    pub fn m(&self) -> usize {
        self.observations.len()
    }

    pub fn event_time(&self) -> f64 {
        self.observations[self.m() - 1].time
    }

    pub fn z_at_event(&self) -> &[f64] {
        &self.observations[self.m() - 1].z
    }

    pub fn terminal(&self) -> TerminalRecord {
        TerminalRecord {
            id: self.id.clone(),
            event_time: self.event_time(),
            z: self.z_at_event().to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// Quasi-Newton machinery

#[derive(Debug, Clone, Copy)]
pub(crate) struct SearchOptions {
    pub max_iter: usize,
    pub eps: f64,
    pub tol: f64,
}

impl SearchOptions {
    fn from_config(cfg: &FitConfig) -> Self {
        Self {
            max_iter: cfg.max_outer_iters,
            eps: cfg.gradient_eps,
            tol: cfg.convergence_tol,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Maximum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences; falls back to a one-sided quotient when one probe is
/// not finite.
pub(crate) fn fd_gradient<F>(f: &F, x: &[f64], fx: f64, eps: f64, coords: std::ops::Range<usize>) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut g = vec![0.0; coords.len()];
    let mut probe = x.to_vec();
    for (slot, i) in coords.enumerate() {
        let h = eps * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        g[slot] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) => (fp - fx) / h,
            (false, true) => (fx - fm) / h,
            (false, false) => 0.0,
        };
    }
    g
}

/// BFGS ascent with Armijo backtracking. Non-finite values count as `-inf`.
pub(crate) fn bfgs_maximize<F>(f: &F, x0: Vec<f64>, opts: SearchOptions) -> Option<Maximum>
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    if !fx.is_finite() {
        return None;
    }
    let mut g = fd_gradient(f, &x, fx, opts.eps, 0..n);
    let mut h = identity(n);
    let mut fresh = true;
    let mut history = vec![fx];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        if norm_inf(&g) == 0.0 {
            converged = true;
            break;
        }
        let mut d = mat_vec(&h, &g);
        if dot(&d, &g) <= 0.0 {
            h = identity(n);
            fresh = true;
            d = g.clone();
        }
        if fresh {
            // first move of at most one unit per coordinate
            let scale = norm_inf(&d).max(1.0);
            d.iter_mut().for_each(|v| *v /= scale);
        }
        let slope = dot(&g, &d);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft >= fx + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if !fresh {
                h = identity(n);
                fresh = true;
                continue;
            }
            converged = norm_inf(&g) <= 1e-4 * (1.0 + fx.abs());
            break;
        };
        let g_new = fd_gradient(f, &x_new, f_new, opts.eps, 0..n);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * (dot(&s, &s) * dot(&y, &y)).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h = identity(n);
                h.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        let step = norm_inf(&s);
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        if step <= opts.tol * (1.0 + norm_inf(&x)) {
            converged = true;
            break;
        }
    }
    Some(Maximum {
        x,
        f: fx,
        iterations,
        converged,
        history,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// Inverse-Hessian update for minimizing `-f`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += (1.0 + yhy * rho) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// Fitters

/// Objective value or `-inf` when the likelihood cannot be evaluated.
fn profiled_value(lik: &ProfiledLikelihood<'_>, a: &[f64], b: &[f64]) -> f64 {
    match lik.value(a, b) {
        Ok(v) => v,
        Err(e) => {
            debug!("objective rejected: {e}");
            f64::NEG_INFINITY
        }
    }
}

/// Start for `a`: grand mean of `z_T / T` on the drift coordinates; the
/// linear part of a `LinearInZ` drift starts at zero.
pub fn initial_drift(template: &DriftModel, data: &[TerminalRecord]) -> Vec<f64> {
    let k = template.temporal().len();
    let mut c = vec![0.0; k];
    for rec in data {
        for (slot, &j) in template.temporal().iter().enumerate() {
            c[slot] += rec.z[j] / rec.event_time;
        }
    }
    c.iter_mut().for_each(|v| *v /= data.len() as f64);
    let mut a = vec![0.0; template.param_dim()];
    a[..k].copy_from_slice(&c);
    a
}

fn split(x: &[f64], d: usize) -> (&[f64], &[f64]) {
    x.split_at(d)
}

fn finish(
    method: FitMethod,
    lik: &ProfiledLikelihood<'_>,
    a: &[f64],
    b: Vec<f64>,
    objective: f64,
    converged: bool,
    iterations: usize,
    history: Vec<f64>,
) -> Result<FitResult, OptimizeError> {
    let eval = lik.evaluate(a, &b)?;
    Ok(FitResult {
        method,
        drift: lik.template().with_params(a)?,
        b_hat: b,
        hazard_hat: eval.hazard,
        loglik: eval.total,
        objective,
        converged,
        iterations,
        selection_mask: None,
        pilot_b: None,
        lambda: None,
        history,
    })
}

/// Unpenalized full-information fit over `(a, b)` with the hazard profiled
/// out; best of `cfg.multistart` starts.
pub fn fit_mle(
    data: &[TerminalRecord],
    family: &DriftSpec,
    cfg: &FitConfig,
    solver: &SolverConfig,
) -> Result<FitResult, OptimizeError> {
    cfg.validate()?;
    if data.len() < 10 {
        return Err(OptimizeError::TooFewRecords {
            min: 10,
            got: data.len(),
        });
    }
    let p = data[0].dim();
    let template = family.template(p)?;
    let lik = ProfiledLikelihood::new(data, &template, *solver, LikelihoodMode::Full, cfg.bandwidth)?;
    let d = template.param_dim();
    let objective = |x: &[f64]| {
        let (a, b) = split(x, d);
        profiled_value(&lik, a, b)
    };
    let mut base = initial_drift(&template, data);
    base.extend(std::iter::repeat_n(0.0, p));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, 0.5).expect("valid normal");
    let mut best: Option<Maximum> = None;
    for start in 0..cfg.multistart {
        let x0: Vec<f64> = if start == 0 {
            base.clone()
        } else {
            base.iter().map(|v| v + jitter.sample(&mut rng)).collect()
        };
        let Some(found) = bfgs_maximize(&objective, x0, SearchOptions::from_config(cfg)) else {
            debug!("start {start}: objective not finite");
            continue;
        };
        info!(
            "mle start {start}: loglik {:.6} after {} iterations (converged: {})",
            found.f, found.iterations, found.converged
        );
        if best.as_ref().is_none_or(|b| found.f > b.f) {
            best = Some(found);
        }
    }
    let best = best.ok_or(OptimizeError::NonFiniteStart)?;
    let (a, b) = split(&best.x, d);
    finish(
        FitMethod::Mle,
        &lik,
        a,
        b.to_vec(),
        best.f,
        best.converged,
        best.iterations,
        best.history,
    )
}

/// Maximizes over `b` (and the profiled hazard) with the drift held at
/// `drift`. `mode` chooses between the full and the conditional likelihood;
/// both have the same maximizer in `b`.
pub fn fit_mle_with_drift(
    data: &[TerminalRecord],
    drift: &DriftModel,
    mode: LikelihoodMode,
    cfg: &FitConfig,
    solver: &SolverConfig,
) -> Result<FitResult, OptimizeError> {
    cfg.validate()?;
    let lik = ProfiledLikelihood::new(data, drift, *solver, mode, cfg.bandwidth)?;
    let a = drift.params().to_vec();
    let objective = |b: &[f64]| profiled_value(&lik, &a, b);
    let found = bfgs_maximize(&objective, vec![0.0; lik.p()], SearchOptions::from_config(cfg))
        .ok_or(OptimizeError::NonFiniteStart)?;
    let method = match mode {
        LikelihoodMode::Full => FitMethod::Mle,
        LikelihoodMode::Conditional => FitMethod::TwoStep,
    };
    finish(
        method,
        &lik,
        &a,
        found.x,
        found.f,
        found.converged,
        found.iterations,
        found.history,
    )
}

fn soft_threshold(v: f64, width: f64) -> f64 {
    if v > width {
        v - width
    } else if v < -width {
        v + width
    } else {
        0.0
    }
}

/// Adaptive LASSO fit: the pilot is the unpenalized fit, the penalty level
/// `n^(-1/4)` unless overridden.
pub fn fit_alasso(
    data: &[TerminalRecord],
    family: &DriftSpec,
    cfg: &FitConfig,
    solver: &SolverConfig,
) -> Result<FitResult, OptimizeError> {
    let pilot = fit_mle(data, family, cfg, solver)?;
    fit_alasso_from_pilot(data, &pilot, cfg, solver)
}

/// Adaptive LASSO fit started from an existing unpenalized fit.
pub fn fit_alasso_from_pilot(
    data: &[TerminalRecord],
    pilot: &FitResult,
    cfg: &FitConfig,
    solver: &SolverConfig,
) -> Result<FitResult, OptimizeError> {
    cfg.validate()?;
    let lambda = cfg.lambda_override.unwrap_or_else(|| default_lambda(data.len()));
    if let Some(j) = pilot.b_hat.iter().position(|v| !(v.abs() >= MIN_PILOT)) {
        return Err(LikelihoodError::DivisionByZeroWeight { index: j }.into());
    }
    let weights: Vec<f64> = pilot.b_hat.iter().map(|v| lambda / (v * v)).collect();
    let penalty = |b: &[f64]| -> f64 { b.iter().zip(&weights).map(|(bj, w)| w * bj.abs()).sum() };

    let template = pilot.drift.clone();
    let lik = ProfiledLikelihood::new(data, &template, *solver, LikelihoodMode::Full, cfg.bandwidth)?;
    let d = template.param_dim();
    let p = lik.p();
    let eps = cfg.gradient_eps;

    let mut a = pilot.a_hat().to_vec();
    let mut b = pilot.b_hat.clone();
    let mut phi = profiled_value(&lik, &a, &b);
    if !phi.is_finite() {
        return Err(OptimizeError::NonFiniteStart);
    }
    let mut history = vec![phi - penalty(&b)];
    let mut h_a = identity(d);
    let mut fresh_a = true;
    let mut step_b = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_outer_iters {
        iterations += 1;

        // (i) quasi-Newton step in a, b fixed (the penalty does not involve a)
        let mut a_move = 0.0;
        if d > 0 {
            let fa = |x: &[f64]| profiled_value(&lik, x, &b);
            let g = fd_gradient(&fa, &a, phi, eps, 0..d);
            let mut dir = mat_vec(&h_a, &g);
            if dot(&dir, &g) <= 0.0 {
                h_a = identity(d);
                fresh_a = true;
                dir = g.clone();
            }
            if fresh_a {
                let scale = norm_inf(&dir).max(1.0);
                dir.iter_mut().for_each(|v| *v /= scale);
            }
            let slope = dot(&g, &dir);
            let mut alpha = 1.0;
            for _ in 0..60 {
                let trial: Vec<f64> = a.iter().zip(&dir).map(|(x, v)| x + alpha * v).collect();
                let ft = fa(&trial);
                if ft.is_finite() && ft >= phi + 1e-4 * alpha * slope {
                    let g_new = fd_gradient(&fa, &trial, ft, eps, 0..d);
                    let s: Vec<f64> = trial.iter().zip(&a).map(|(x, y)| x - y).collect();
                    let y: Vec<f64> = g.iter().zip(&g_new).map(|(x, y)| x - y).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-12 * (dot(&s, &s) * dot(&y, &y)).sqrt() {
                        if fresh_a {
                            let scale = sy / dot(&y, &y);
                            h_a = identity(d);
                            h_a.iter_mut().for_each(|v| *v *= scale);
                            fresh_a = false;
                        }
                        bfgs_update(&mut h_a, &s, &y, sy);
                    }
                    a_move = norm_inf(&s);
                    a = trial;
                    phi = ft;
                    break;
                }
                alpha *= 0.5;
            }
        }

        // (ii) proximal gradient sweep in b, (iii) hazard re-profiled inside
        // every evaluation
        let fb = |x: &[f64]| profiled_value(&lik, &a, x);
        let g = fd_gradient(&fb, &b, phi, eps, 0..p);
        let mut b_move = 0.0;
        let mut t = (step_b * 2.0).min(1e3);
        for _ in 0..60 {
            let trial: Vec<f64> = b
                .iter()
                .zip(&g)
                .zip(&weights)
                .map(|((bj, gj), w)| soft_threshold(bj + t * gj, t * w))
                .collect();
            let diff: Vec<f64> = trial.iter().zip(&b).map(|(x, y)| x - y).collect();
            let ft = fb(&trial);
            let model = phi + dot(&g, &diff) - dot(&diff, &diff) / (2.0 * t);
            if ft.is_finite() && ft >= model - 1e-12 * phi.abs() {
                let old = phi - penalty(&b);
                let new = ft - penalty(&trial);
                if new >= old || norm_inf(&diff) == 0.0 {
                    b_move = norm_inf(&diff);
                    b = trial;
                    phi = ft;
                    step_b = t;
                    break;
                }
            }
            t *= 0.5;
        }
        history.push(phi - penalty(&b));
        let scale = 1.0 + norm_inf(&a).max(norm_inf(&b));
        if a_move.max(b_move) <= cfg.convergence_tol * scale {
            converged = true;
            break;
        }
    }

    for v in b.iter_mut() {
        if v.abs() < cfg.zero_threshold {
            *v = 0.0;
        }
    }
    let mask: Vec<bool> = b.iter().map(|v| v.abs() > cfg.zero_threshold).collect();
    let objective = profiled_value(&lik, &a, &b) - penalty(&b);
    info!(
        "alasso: objective {objective:.6}, {} selected, {iterations} iterations (converged: {converged})",
        mask.iter().filter(|m| **m).count()
    );
    let mut fit = finish(
        FitMethod::Alasso,
        &lik,
        &a,
        b,
        objective,
        converged,
        iterations,
        history,
    )?;
    fit.selection_mask = Some(mask);
    fit.pilot_b = Some(pilot.b_hat.clone());
    fit.lambda = Some(lambda);
    Ok(fit)
}

/// Step 1 objective: mean over subjects of the mean squared distance between
/// each panel observation and the backward trajectory from the event.
pub fn panel_distance(
    model: &DriftModel,
    panel: &[PanelRecord],
    solver: &SolverConfig,
) -> Result<f64, OptimizeError> {
    let per = crate::par::try_map(panel.len(), |i| {
        let rec = &panel[i];
        let t = rec.event_time();
        let traj = solve_g(model, rec.z_at_event(), t, solver)?;
        let mut acc = 0.0;
        for obs in &rec.observations {
            let at = traj.at(t - obs.time);
            acc += at.iter().zip(&obs.z).map(|(x, z)| (x - z) * (x - z)).sum::<f64>();
        }
        Ok::<_, OptimizeError>(acc / rec.m() as f64)
    })?;
    Ok(per.iter().sum::<f64>() / panel.len() as f64)
}

/// Least-squares drift estimate for the constant family, which the Step 1
/// objective admits in closed form.
pub fn constant_drift_least_squares(template: &DriftModel, panel: &[PanelRecord]) -> Vec<f64> {
    let k = template.temporal().len();
    let mut num = vec![0.0; k];
    let mut den = 0.0;
    for rec in panel {
        let w = 1.0 / rec.m() as f64;
        let (t, z) = (rec.event_time(), rec.z_at_event());
        for obs in &rec.observations {
            let lag = t - obs.time;
            den += w * lag * lag;
            for (slot, &j) in template.temporal().iter().enumerate() {
                num[slot] += w * lag * (z[j] - obs.z[j]);
            }
        }
    }
    let mut a = vec![0.0; template.param_dim()];
    if den > 0.0 {
        for (slot, v) in num.iter().enumerate() {
            a[slot] = v / den;
        }
    }
    a
}

/// Two-step fit: drift from the panel trajectories, then `(b, lambda)` from
/// the conditional likelihood of the terminal observations.
pub fn fit_two_step(
    panel: &[PanelRecord],
    family: &DriftSpec,
    cfg: &FitConfig,
    solver: &SolverConfig,
) -> Result<FitResult, OptimizeError> {
    cfg.validate()?;
    if let Some(rec) = panel.iter().find(|r| r.m() < 2) {
        return Err(OptimizeError::InsufficientPanel {
            id: rec.id.clone(),
            m: rec.m(),
        });
    }
    if panel.len() < 2 {
        return Err(OptimizeError::TooFewRecords {
            min: 2,
            got: panel.len(),
        });
    }
    let p = panel[0].z_at_event().len();
    let template = family.template(p)?;
    let a_hat = step_one(&template, panel, cfg, solver)?;
    let drift = template.with_params(&a_hat)?;
    let data: Vec<TerminalRecord> = panel.iter().map(PanelRecord::terminal).collect();
    let fit = fit_mle_with_drift(&data, &drift, LikelihoodMode::Conditional, cfg, solver)?;
    Ok(fit)
}

/// Step 1 only: `a_E`.
pub fn step_one(
    template: &DriftModel,
    panel: &[PanelRecord],
    cfg: &FitConfig,
    solver: &SolverConfig,
) -> Result<Vec<f64>, OptimizeError> {
    let start = constant_drift_least_squares(template, panel);
    if template.family() == DriftFamily::Constant {
        return Ok(start);
    }
    let objective = |a: &[f64]| match template.with_params(a) {
        Ok(model) => match panel_distance(&model, panel, solver) {
            Ok(v) => -v,
            Err(_) => f64::NEG_INFINITY,
        },
        Err(_) => f64::NEG_INFINITY,
    };
    let found = bfgs_maximize(&objective, start, SearchOptions::from_config(cfg))
        .ok_or(OptimizeError::NonFiniteStart)?;
    Ok(found.x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_finds_quadratic_maximum() {
        let f = |x: &[f64]| -(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 2.0).powi(2) - x[0] * x[1];
        let opts = SearchOptions {
            max_iter: 200,
            eps: 1e-5,
            tol: 1e-9,
        };
        let m = bfgs_maximize(&f, vec![0.0, 0.0], opts).unwrap();
        // grad: -2(x0-1) - x1 = 0, -6(x1+2) - x0 = 0
        let x1 = -26.0 / 11.0;
        let x0 = 1.0 - x1 / 2.0;
        assert!(m.converged);
        assert!((m.x[0] - x0).abs() < 1e-5 && (m.x[1] - x1).abs() < 1e-5, "{:?}", m.x);
        assert!(m.history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn bfgs_rejects_non_finite_start() {
        let f = |_: &[f64]| f64::NAN;
        assert!(bfgs_maximize(&f, vec![0.0], SearchOptions { max_iter: 5, eps: 1e-5, tol: 1e-6 })
            .is_none());
    }

    #[test]
    fn bfgs_respects_infeasible_region() {
        // log barrier: -inf for x <= 0
        let f = |x: &[f64]| if x[0] > 0.0 { x[0].ln() - x[0] } else { f64::NEG_INFINITY };
        let m = bfgs_maximize(&f, vec![0.05], SearchOptions { max_iter: 100, eps: 1e-7, tol: 1e-10 })
            .unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn two_point_slope() {
        let template = DriftModel::zeros(DriftFamily::Constant, 1, vec![0]).unwrap();
        let rec = PanelRecord::new(
            "s",
            vec![
                PanelObservation { time: 0.0, z: vec![0.0] },
                PanelObservation { time: 1.0, z: vec![1.0] },
            ],
        )
        .unwrap();
        let a = step_one(&template, &[rec], &FitConfig::default(), &SolverConfig::default()).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn panel_validation() {
        let obs = |t: f64| PanelObservation { time: t, z: vec![0.0] };
        assert!(PanelRecord::new("a", vec![obs(1.0), obs(1.0)]).is_err());
        assert!(PanelRecord::new("a", vec![]).is_err());
        assert!(PanelRecord::new("a", vec![obs(0.0)]).is_err());
        let single = PanelRecord::new("a", vec![obs(1.0)]).unwrap();
        let two = PanelRecord::new("b", vec![obs(0.5), obs(1.0)]).unwrap();
        assert!(matches!(
            fit_two_step(
                &[single, two],
                &DriftSpec::new(DriftFamily::Constant),
                &FitConfig::default(),
                &SolverConfig::default()
            ),
            Err(OptimizeError::InsufficientPanel { m: 1, .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let bad = FitConfig {
            zero_threshold: 0.5,
            ..FitConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FitConfig {
            lambda_override: Some(-1.0),
            ..FitConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn soft_threshold_shrinks_towards_zero() {
        assert_eq!(soft_threshold(1.5, 0.5), 1.0);
        assert_eq!(soft_threshold(-1.5, 0.5), -1.0);
        assert_eq!(soft_threshold(0.3, 0.5), 0.0);
    }
}
