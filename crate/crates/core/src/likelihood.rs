//! Full-information log-likelihood of terminal observations, its adaptive
//! LASSO penalized form, and the conditional likelihood used once the drift is
//! fixed.
//!
//! Every subject contributes
//!
//! ```text
//! log p_a(g(z, t, t), 0) + log J + log lambda(t-) + b.z - int_0^r lambda(s) exp(b . Z(s)) ds
//! ```
//!
//! where `Z(s)` is the backward Euler path through `(z, t)` and `r` is the
//! at-risk horizon: when `t` is itself a knot of the hazard, the step that
//! closes at `t` is left out of the integral. With knots at the ordered
//! event times this makes the profiled heights of
//! [`crate::hazard::profile_thetas`] the exact stationary point in `theta`.

use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::density::{default_bandwidth, DensityError, KernelDensity};
use crate::drift::{solve_g, solve_g_with_jacobian, DriftError, DriftModel, SolverConfig, Trajectory};
use crate::hazard::{step_exposures, ExponentOverflow, HazardError, StepwiseHazard};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("need at least {min} records, got {got}")]
    TooFewRecords { min: usize, got: usize },
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite likelihood term `{term}` for subject {subject}")]
    NonFiniteLikelihood { subject: usize, term: &'static str },
    #[error("pilot coefficient {index} is (numerically) zero; adaptive weight undefined")]
    DivisionByZeroWeight { index: usize },
    #[error("penalty level must be positive and finite, got {0}")]
    InvalidPenalty(f64),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Hazard(#[from] HazardError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// One subject observed only at its event: `(id, T, Z_T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalRecord {
    pub id: String,
    pub event_time: f64,
    pub z: Vec<f64>,
}

impl TerminalRecord {
    pub fn new(id: impl Into<String>, event_time: f64, z: Vec<f64>) -> Result<Self, LikelihoodError> {
        let rec = Self {
            id: id.into(),
            event_time,
            z,
        };
        rec.validate(0)?;
        Ok(rec)
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    fn validate(&self, index: usize) -> Result<(), LikelihoodError> {
        if !(self.event_time > 0.0 && self.event_time.is_finite()) {
            return Err(LikelihoodError::InvalidRecord {
                index,
                reason: format!("event time {} is not positive and finite", self.event_time),
            });
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(LikelihoodError::InvalidRecord {
                index,
                reason: "non-finite covariate".into(),
            });
        }
        Ok(())
    }
}

/// `(a, b, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterProfile {
    pub drift: DriftModel,
    pub b: Vec<f64>,
    pub hazard: StepwiseHazard,
}

/// Per-subject breakdown; `integral` already carries the minus sign.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SubjectTerms {
    pub log_density: f64,
    pub log_jacobian: f64,
    pub log_hazard: f64,
    pub linear: f64,
    pub integral: f64,
}

impl SubjectTerms {
    pub fn total(&self) -> f64 {
        self.log_density + self.log_jacobian + self.log_hazard + self.linear + self.integral
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodValue {
    /// Mean of `per_subject`.
    pub total: f64,
    pub per_subject: Vec<f64>,
    pub components: Vec<SubjectTerms>,
}

/// Records sorted by event time (stable), with tie-jittered knots.
#[derive(Debug, Clone)]
pub(crate) struct SortedSample<'a> {
    records: Vec<&'a TerminalRecord>,
    order: Vec<usize>,
    knots: Vec<f64>,
    p: usize,
}

/// Linear predictor along a path, on ascending absolute time.
#[derive(Debug, Clone)]
pub(crate) struct PathEta {
    s: Vec<f64>,
    eta: Vec<f64>,
}

/// Separation added to tied knots, per rank inside the tie.
pub const TIE_JITTER: f64 = 1e-9;

impl<'a> SortedSample<'a> {
    pub(crate) fn new(data: &'a [TerminalRecord]) -> Result<Self, LikelihoodError> {
        if data.is_empty() {
            return Err(LikelihoodError::TooFewRecords { min: 1, got: 0 });
        }
        let p = data[0].dim();
        for (i, rec) in data.iter().enumerate() {
            rec.validate(i)?;
            if rec.dim() != p {
                return Err(LikelihoodError::Dimension {
                    expected: p,
                    got: rec.dim(),
                });
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&i, &j| data[i].event_time.total_cmp(&data[j].event_time));
        let records: Vec<&TerminalRecord> = order.iter().map(|&i| &data[i]).collect();
        let mut knots = Vec::with_capacity(data.len() + 1);
        knots.push(0.0);
        let mut rank = 0usize;
        for (i, rec) in records.iter().enumerate() {
            let t = rec.event_time;
            if i > 0 && t == records[i - 1].event_time {
                rank += 1;
            } else {
                rank = 0;
            }
            let prev = knots[knots.len() - 1];
            let mut knot = t + TIE_JITTER * rank as f64;
            if knot <= prev {
                knot = prev + TIE_JITTER;
            }
            knots.push(knot);
        }
        Ok(Self {
            records,
            order,
            knots,
            p,
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.records.len()
    }

    pub(crate) fn dim(&self) -> usize {
        self.p
    }

    pub(crate) fn record(&self, i: usize) -> &'a TerminalRecord {
        self.records[i]
    }

    /// Original index of sorted position `i`.
    pub(crate) fn original(&self, i: usize) -> usize {
        self.order[i]
    }

    /// Integration time (possibly tie-jittered) of sorted position `i`.
    pub(crate) fn time(&self, i: usize) -> f64 {
        self.knots[i + 1]
    }

    pub(crate) fn path_eta(&self, i: usize, traj: &Trajectory, b: &[f64]) -> PathEta {
        let t = self.records[i].event_time;
        let m = traj.len() - 1;
        let proj = traj.project(b);
        let s = (0..=m).map(|k| t - traj.grid[m - k]).collect();
        let eta = (0..=m).map(|k| proj[m - k]).collect();
        PathEta { s, eta }
    }

    /// `out[i][k]`: exposure of sorted subject `i` over step `k < i`.
    pub(crate) fn exposures(&self, etas: &[PathEta]) -> Result<Vec<Vec<f64>>, LikelihoodError> {
        par::try_map(self.len(), |i| {
            let mut out = Vec::with_capacity(i);
            let path = &etas[i];
            step_exposures(&path.s, &path.eta, &self.knots, 0.0, self.knots[i], &mut out)
                .map_err(|_: ExponentOverflow| LikelihoodError::NonFiniteLikelihood {
                    subject: self.order[i],
                    term: "integral",
                })?;
            out.resize(i, 0.0);
            Ok(out)
        })
    }

    /// Step heights solving the first-order conditions: the risk set of step
    /// `k` is every subject whose event comes after the knot closing it.
    pub(crate) fn profile(&self, exposures: &[Vec<f64>]) -> Result<StepwiseHazard, LikelihoodError> {
        let n = self.len();
        if n < 2 {
            return Err(LikelihoodError::TooFewRecords { min: 2, got: n });
        }
        let mut denom = vec![0.0; n];
        for row in exposures {
            for (k, e) in row.iter().enumerate() {
                denom[k] += e;
            }
        }
        let mut heights = Vec::with_capacity(n);
        for (k, d) in denom[..n - 1].iter().enumerate() {
            let theta = 1.0 / d;
            if !(theta.is_finite() && theta > 0.0) {
                return Err(LikelihoodError::NonFiniteLikelihood {
                    subject: self.order[k],
                    term: "profiled hazard",
                });
            }
            heights.push(theta);
        }
        heights.push(heights[n - 2]);
        Ok(StepwiseHazard::new(self.knots.clone(), heights)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_b(b: &[f64], p: usize) -> Result<(), LikelihoodError> {
    if b.len() != p {
        return Err(LikelihoodError::Dimension {
            expected: p,
            got: b.len(),
        });
    }
    Ok(())
}

fn finite(value: f64, subject: usize, term: &'static str) -> Result<f64, LikelihoodError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LikelihoodError::NonFiniteLikelihood { subject, term })
    }
}

fn subject_terms(
    profile: &ParameterProfile,
    sample: &SortedSample<'_>,
    i: usize,
    density: Option<&KernelDensity>,
    cfg: &SolverConfig,
) -> Result<SubjectTerms, LikelihoodError> {
    let rec = sample.record(i);
    let subject = sample.original(i);
    let with_jac = density.is_some() && !profile.drift.is_translation();
    let traj = if with_jac {
        solve_g_with_jacobian(&profile.drift, &rec.z, rec.event_time, cfg)?
    } else {
        solve_g(&profile.drift, &rec.z, rec.event_time, cfg)?
    };
    let mut terms = SubjectTerms::default();
    if let Some(kd) = density {
        terms.log_density = finite(kd.log_density(traj.end()), subject, "log density")?;
        terms.log_jacobian = finite(
            traj.jac_log.last().copied().unwrap_or(0.0),
            subject,
            "log jacobian",
        )?;
    }
    let hazard = &profile.hazard;
    let t = sample.time(i);
    terms.log_hazard = finite(hazard.left_limit(t).ln(), subject, "log hazard")?;
    terms.linear = finite(dot(&profile.b, &rec.z), subject, "linear")?;
    let path = sample.path_eta(i, &traj, &profile.b);
    let mut out = Vec::new();
    step_exposures(&path.s, &path.eta, hazard.knots(), 0.0, hazard.risk_horizon(t), &mut out)
        .map_err(|_| LikelihoodError::NonFiniteLikelihood {
            subject,
            term: "integral",
        })?;
    let heights = hazard.heights();
    let integral: f64 = out
        .iter()
        .enumerate()
        .map(|(k, e)| heights[k.min(heights.len() - 1)] * e)
        .sum();
    terms.integral = finite(-integral, subject, "integral")?;
    Ok(terms)
}

fn assemble(sample: &SortedSample<'_>, sorted_terms: Vec<SubjectTerms>) -> LikelihoodValue {
    let n = sample.len();
    let mut components = vec![SubjectTerms::default(); n];
    for (i, terms) in sorted_terms.into_iter().enumerate() {
        components[sample.original(i)] = terms;
    }
    let per_subject: Vec<f64> = components.iter().map(SubjectTerms::total).collect();
    let total = per_subject.iter().sum::<f64>() / n as f64;
    LikelihoodValue {
        total,
        per_subject,
        components,
    }
}

/// Full-information log-likelihood, kernel width `n^(-1/4)`.
pub fn full_loglik(
    profile: &ParameterProfile,
    data: &[TerminalRecord],
    cfg: &SolverConfig,
) -> Result<LikelihoodValue, LikelihoodError> {
    full_loglik_with(profile, data, cfg, None)
}

/// Full-information log-likelihood with an optional kernel-width override.
pub fn full_loglik_with(
    profile: &ParameterProfile,
    data: &[TerminalRecord],
    cfg: &SolverConfig,
    bandwidth: Option<f64>,
) -> Result<LikelihoodValue, LikelihoodError> {
    if data.len() < 2 {
        return Err(LikelihoodError::TooFewRecords {
            min: 2,
            got: data.len(),
        });
    }
    let sample = SortedSample::new(data)?;
    check_b(&profile.b, sample.dim())?;
    let density =
        crate::density::build_initial_density_with(&profile.drift, data, cfg, bandwidth)?;
    let terms = par::try_map(sample.len(), |i| {
        subject_terms(profile, &sample, i, Some(&density), cfg)
    })?;
    Ok(assemble(&sample, terms))
}

/// Per-subject conditional log-density `log rho(z, t)`: the full
/// contribution without the initial-density and Jacobian terms.
pub fn conditional_terms(
    profile: &ParameterProfile,
    data: &[TerminalRecord],
    cfg: &SolverConfig,
) -> Result<LikelihoodValue, LikelihoodError> {
    let sample = SortedSample::new(data)?;
    check_b(&profile.b, sample.dim())?;
    let terms = par::try_map(sample.len(), |i| subject_terms(profile, &sample, i, None, cfg))?;
    Ok(assemble(&sample, terms))
}

/// Mean conditional log-density.
pub fn conditional_loglik(
    profile: &ParameterProfile,
    data: &[TerminalRecord],
    cfg: &SolverConfig,
) -> Result<f64, LikelihoodError> {
    Ok(conditional_terms(profile, data, cfg)?.total)
}

/// Smallest pilot magnitude accepted as an adaptive weight denominator.
pub const MIN_PILOT: f64 = 1e-12;

/// `lambda * sum_j |b_j| / |pilot_j|^2`.
pub fn adaptive_penalty(b: &[f64], pilot: &[f64], lambda: f64) -> Result<f64, LikelihoodError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(LikelihoodError::InvalidPenalty(lambda));
    }
    check_b(pilot, b.len())?;
    let mut acc = 0.0;
    for (j, (bj, pj)) in b.iter().zip(pilot).enumerate() {
        if !(pj.abs() >= MIN_PILOT) {
            return Err(LikelihoodError::DivisionByZeroWeight { index: j });
        }
        acc += bj.abs() / (pj * pj);
    }
    Ok(lambda * acc)
}

/// Default penalty level `n^(-1/4)`.
pub fn default_lambda(n: usize) -> f64 {
    (n as f64).powf(-0.25)
}

pub fn penalized_loglik(
    profile: &ParameterProfile,
    b_pilot: &[f64],
    data: &[TerminalRecord],
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<f64, LikelihoodError> {
    let penalty = adaptive_penalty(&profile.b, b_pilot, lambda)?;
    Ok(full_loglik(profile, data, cfg)?.total - penalty)
}

/// Which terms enter the profiled objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodMode {
    /// All five terms.
    Full,
    /// Without the initial density and Jacobian (drift held fixed).
    Conditional,
}

struct DriftState {
    a: Vec<f64>,
    trajectories: Vec<Trajectory>,
    /// `log density + log jacobian` per sorted subject.
    static_terms: Vec<f64>,
}

/// Result of one profiled evaluation.
#[derive(Debug, Clone)]
pub struct ProfiledValue {
    pub total: f64,
    /// In the caller's record order.
    pub per_subject: Vec<f64>,
    pub hazard: StepwiseHazard,
}

/// The likelihood as a function of `(a, b)` with the step heights profiled
/// out. Trajectories and kernel terms depend on `a` only and are cached for
/// the last couple of drift parameter vectors.
pub struct ProfiledLikelihood<'a> {
    sample: SortedSample<'a>,
    template: DriftModel,
    solver: SolverConfig,
    mode: LikelihoodMode,
    bandwidth: Option<f64>,
    cache: Mutex<Vec<Arc<DriftState>>>,
}

const CACHE_SLOTS: usize = 2;

impl<'a> ProfiledLikelihood<'a> {
    pub fn new(
        data: &'a [TerminalRecord],
        template: &DriftModel,
        solver: SolverConfig,
        mode: LikelihoodMode,
        bandwidth: Option<f64>,
    ) -> Result<Self, LikelihoodError> {
        if data.len() < 2 {
            return Err(LikelihoodError::TooFewRecords {
                min: 2,
                got: data.len(),
            });
        }
        let sample = SortedSample::new(data)?;
        if template.p() != sample.dim() {
            return Err(LikelihoodError::Dimension {
                expected: template.p(),
                got: sample.dim(),
            });
        }
        Ok(Self {
            sample,
            template: template.clone(),
            solver,
            mode,
            bandwidth,
            cache: Mutex::new(Vec::new()),
        })
    }

    pub fn n(&self) -> usize {
        self.sample.len()
    }

    pub fn p(&self) -> usize {
        self.sample.dim()
    }

    pub fn drift_dim(&self) -> usize {
        self.template.param_dim()
    }

    pub fn mode(&self) -> LikelihoodMode {
        self.mode
    }

    pub fn template(&self) -> &DriftModel {
        &self.template
    }

    fn drift_state(&self, a: &[f64]) -> Result<Arc<DriftState>, LikelihoodError> {
        {
            let mut cache = self.cache.lock().expect("cache poisoned");
            if let Some(pos) = cache.iter().position(|s| s.a == a) {
                let hit = cache.remove(pos);
                cache.insert(0, hit.clone());
                return Ok(hit);
            }
        }
        let model = self.template.with_params(a)?;
        let full = self.mode == LikelihoodMode::Full;
        let with_jac = full && !model.is_translation();
        let sample = &self.sample;
        let trajectories = par::try_map(sample.len(), |i| {
            let rec = sample.record(i);
            if with_jac {
                solve_g_with_jacobian(&model, &rec.z, rec.event_time, &self.solver)
            } else {
                solve_g(&model, &rec.z, rec.event_time, &self.solver)
            }
        })?;
        let static_terms = if full {
            let centers = trajectories.iter().map(|t| t.end().to_vec()).collect();
            let h = self
                .bandwidth
                .unwrap_or_else(|| default_bandwidth(sample.len()));
            let kd = KernelDensity::from_centers(centers, h)?;
            par::try_map(sample.len(), |i| {
                let traj = &trajectories[i];
                let subject = sample.original(i);
                let ld = finite(kd.log_density(traj.end()), subject, "log density")?;
                let lj = finite(
                    traj.jac_log.last().copied().unwrap_or(0.0),
                    subject,
                    "log jacobian",
                )?;
                Ok::<_, LikelihoodError>(ld + lj)
            })?
        } else {
            vec![0.0; sample.len()]
        };
        let state = Arc::new(DriftState {
            a: a.to_vec(),
            trajectories,
            static_terms,
        });
        let mut cache = self.cache.lock().expect("cache poisoned");
        cache.insert(0, state.clone());
        cache.truncate(CACHE_SLOTS);
        Ok(state)
    }

    pub fn evaluate(&self, a: &[f64], b: &[f64]) -> Result<ProfiledValue, LikelihoodError> {
        check_b(b, self.p())?;
        let state = self.drift_state(a)?;
        let sample = &self.sample;
        let etas: Vec<PathEta> = par::map(sample.len(), |i| {
            sample.path_eta(i, &state.trajectories[i], b)
        });
        let exposures = sample.exposures(&etas)?;
        let hazard = sample.profile(&exposures)?;
        let heights = hazard.heights();
        let sorted = par::try_map(sample.len(), |i| {
            let subject = sample.original(i);
            let log_hazard = finite(heights[i].ln(), subject, "log hazard")?;
            let linear = dot(b, &sample.record(i).z);
            let integral: f64 = exposures[i]
                .iter()
                .zip(heights)
                .map(|(e, h)| h * e)
                .sum();
            finite(
                state.static_terms[i] + log_hazard + linear + (-integral),
                subject,
                "total",
            )
        })?;
        let mut per_subject = vec![0.0; sample.len()];
        for (i, v) in sorted.into_iter().enumerate() {
            per_subject[sample.original(i)] = v;
        }
        let total = per_subject.iter().sum::<f64>() / sample.len() as f64;
        Ok(ProfiledValue {
            total,
            per_subject,
            hazard,
        })
    }

    pub fn value(&self, a: &[f64], b: &[f64]) -> Result<f64, LikelihoodError> {
        Ok(self.evaluate(a, b)?.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::DriftFamily;

    fn constant(p: usize, a: Vec<f64>) -> DriftModel {
        DriftModel::new(DriftFamily::Constant, p, a).unwrap()
    }

    #[test]
    fn rejects_single_record() {
        let data = vec![TerminalRecord::new("x", 1.0, vec![0.0]).unwrap()];
        let profile = ParameterProfile {
            drift: constant(1, vec![0.0]),
            b: vec![0.0],
            hazard: StepwiseHazard::constant(1.0, 10.0).unwrap(),
        };
        assert!(matches!(
            full_loglik(&profile, &data, &SolverConfig::default()),
            Err(LikelihoodError::TooFewRecords { .. })
        ));
    }

    #[test]
    fn hand_evaluated_unit_hazard_contribution() {
        // Centers {0, 1}, h = 2^(-1/4); subject (z = 0, t = 1) with lambda = 1
        // on a grid whose knots do not include t.
        let data = vec![
            TerminalRecord::new("a", 1.0, vec![0.0]).unwrap(),
            TerminalRecord::new("b", 2.0, vec![1.0]).unwrap(),
        ];
        let profile = ParameterProfile {
            drift: constant(1, vec![0.0]),
            b: vec![0.0],
            hazard: StepwiseHazard::constant(1.0, 10.0).unwrap(),
        };
        let value = full_loglik(&profile, &data, &SolverConfig::default()).unwrap();
        let h2 = 2f64.powf(-0.5);
        let kernel = |d: f64| (-d * d / (2.0 * h2)).exp() / (2.0 * std::f64::consts::PI * h2).sqrt();
        let expected_density = (0.5 * (kernel(0.0) + kernel(1.0))).ln();
        let c = value.components[0];
        assert!((c.log_density - expected_density).abs() < 1e-14);
        assert_eq!(c.log_jacobian, 0.0);
        assert_eq!(c.log_hazard, 0.0);
        assert_eq!(c.linear, 0.0);
        assert!((c.integral + 1.0).abs() < 1e-14);
        assert!((value.per_subject[0] - (expected_density - 1.0)).abs() < 1e-14);
        let mean = value.per_subject.iter().sum::<f64>() / 2.0;
        assert_eq!(value.total, mean);
    }

    #[test]
    fn conditional_is_full_minus_static_terms() {
        let data: Vec<TerminalRecord> = (0..6)
            .map(|i| {
                TerminalRecord::new(
                    format!("s{i}"),
                    0.3 + 0.17 * i as f64,
                    vec![(i as f64 * 0.7).sin(), 0.2 * i as f64],
                )
                .unwrap()
            })
            .collect();
        let profile = ParameterProfile {
            drift: constant(2, vec![0.4, -0.3]),
            b: vec![0.5, -0.25],
            hazard: StepwiseHazard::new(vec![0.0, 0.5, 1.0, 3.0], vec![0.8, 1.1, 1.5]).unwrap(),
        };
        let cfg = SolverConfig::default();
        let full = full_loglik(&profile, &data, &cfg).unwrap();
        let cond = conditional_terms(&profile, &data, &cfg).unwrap();
        for (f, c) in full.components.iter().zip(&cond.components) {
            let diff = f.total() - f.log_density - f.log_jacobian - c.total();
            assert!(diff.abs() < 1e-12);
        }
    }

    #[test]
    fn unit_hazard_zero_coefficients_give_minus_t() {
        let data = vec![
            TerminalRecord::new("a", 0.7, vec![1.0]).unwrap(),
            TerminalRecord::new("b", 1.9, vec![-2.0]).unwrap(),
        ];
        let profile = ParameterProfile {
            drift: constant(1, vec![0.3]),
            b: vec![0.0],
            hazard: StepwiseHazard::constant(1.0, 10.0).unwrap(),
        };
        let cond = conditional_terms(&profile, &data, &SolverConfig::default()).unwrap();
        assert!((cond.per_subject[0] + 0.7).abs() < 1e-14);
        assert!((cond.per_subject[1] + 1.9).abs() < 1e-14);
    }

    #[test]
    fn conditional_integral_against_riemann_sum() {
        // b = 1, a = 0.5, z = 0.5, t = 1, lambda = 1:
        // integral = int_0^1 exp(0.5 - 0.5 tau) dtau.
        let data = vec![
            TerminalRecord::new("a", 1.0, vec![0.5]).unwrap(),
            TerminalRecord::new("b", 2.0, vec![0.0]).unwrap(),
        ];
        let profile = ParameterProfile {
            drift: constant(1, vec![0.5]),
            b: vec![1.0],
            hazard: StepwiseHazard::constant(1.0, 10.0).unwrap(),
        };
        let n = 10_000;
        let riemann: f64 = (0..n)
            .map(|k| {
                let tau = (k as f64 + 0.5) / n as f64;
                (0.5 - 0.5 * tau).exp() / n as f64
            })
            .sum();
        let cond = conditional_terms(&profile, &data, &SolverConfig::default()).unwrap();
        let c = cond.components[0];
        assert!((c.integral + riemann).abs() < 1e-4);
        assert!((c.linear - 0.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_formula() {
        assert_eq!(adaptive_penalty(&[0.0, 0.0], &[0.3, -2.0], 0.7).unwrap(), 0.0);
        let pen = adaptive_penalty(&[1.0, -2.0], &[1.0, 1.0], 0.5).unwrap();
        assert!((pen - 1.5).abs() < 1e-15);
        assert!(matches!(
            adaptive_penalty(&[1.0], &[0.0], 0.5),
            Err(LikelihoodError::DivisionByZeroWeight { index: 0 })
        ));
        assert!((default_lambda(400) - 0.223_606_797_749_979).abs() < 1e-12);
    }

    #[test]
    fn ties_get_increasing_knots() {
        let data = vec![
            TerminalRecord::new("a", 1.0, vec![0.0]).unwrap(),
            TerminalRecord::new("b", 1.0, vec![0.0]).unwrap(),
            TerminalRecord::new("c", 0.5, vec![0.0]).unwrap(),
        ];
        let sample = SortedSample::new(&data).unwrap();
        assert_eq!(sample.record(0).id, "c");
        assert_eq!(sample.record(1).id, "a");
        assert_eq!(&sample.knots[..], &[0.0, 0.5, 1.0, 1.0 + TIE_JITTER]);
    }
}
