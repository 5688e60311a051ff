//! Long-term survival rate: the probability of no event over `[t, t + t']`
//! for a subject seen at covariate value `z` at time `t`, following the
//! fitted drift forward and the fitted hazard.

use thiserror::Error;

use crate::drift::{solve_g_inverse_path, DriftError, SolverConfig};
use crate::hazard::step_exposures;
use crate::optimize::FitResult;
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("query {index}: {reason}")]
    InvalidQuery { index: usize, reason: String },
    #[error("query {index}: exponent overflow in the survival integral")]
    NonFiniteForecast { index: usize },
    #[error(transparent)]
    Drift(#[from] DriftError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastQuery {
    pub id: String,
    pub z: Vec<f64>,
    pub t: f64,
    pub t_prime: f64,
}

impl ForecastQuery {
    pub fn new(id: impl Into<String>, z: Vec<f64>, t: f64, t_prime: f64) -> Self {
        Self {
            id: id.into(),
            z,
            t,
            t_prime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forecast {
    pub survival: f64,
    /// The window runs past the last knot of the fitted hazard, where the
    /// last step height is carried forward.
    pub extrapolated: bool,
}

fn check(q: &ForecastQuery, p: usize, index: usize) -> Result<(), ForecastError> {
    let invalid = |reason: &str| ForecastError::InvalidQuery {
        index,
        reason: reason.to_string(),
    };
    if q.z.len() != p {
        return Err(invalid("covariate dimension does not match the fit"));
    }
    if q.z.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite covariate"));
    }
    if !(q.t >= 0.0 && q.t.is_finite()) {
        return Err(invalid("t must be non-negative and finite"));
    }
    if !(q.t_prime > 0.0 && q.t_prime.is_finite()) {
        return Err(invalid("t_prime must be positive and finite"));
    }
    Ok(())
}

/// `exp(-int_t^{t+t'} lambda(s) exp(b . Z(s)) ds)` with `Z` the forward drift
/// path through `(z, t)`.
pub fn ltsr(fit: &FitResult, q: &ForecastQuery, solver: &SolverConfig) -> Result<Forecast, ForecastError> {
    ltsr_indexed(fit, q, solver, 0)
}

fn ltsr_indexed(
    fit: &FitResult,
    q: &ForecastQuery,
    solver: &SolverConfig,
    index: usize,
) -> Result<Forecast, ForecastError> {
    check(q, fit.drift.p(), index)?;
    let traj = solve_g_inverse_path(&fit.drift, &q.z, q.t, q.t_prime, solver)?;
    let s: Vec<f64> = traj.grid.iter().map(|tau| q.t + tau).collect();
    let eta = traj.project(&fit.b_hat);
    let end = q.t + q.t_prime;
    let hazard = &fit.hazard_hat;
    let mut out = Vec::new();
    step_exposures(&s, &eta, hazard.knots(), q.t, end, &mut out)
        .map_err(|_| ForecastError::NonFiniteForecast { index })?;
    let heights = hazard.heights();
    let integral: f64 = out
        .iter()
        .enumerate()
        .map(|(k, e)| heights[k.min(heights.len() - 1)] * e)
        .sum();
    if !integral.is_finite() {
        return Err(ForecastError::NonFiniteForecast { index });
    }
    Ok(Forecast {
        survival: (-integral).exp().clamp(0.0, 1.0),
        extrapolated: end > hazard.last_knot(),
    })
}

pub fn ltsr_batch(
    fit: &FitResult,
    queries: &[ForecastQuery],
    solver: &SolverConfig,
) -> Result<Vec<Forecast>, ForecastError> {
    par::try_map(queries.len(), |i| ltsr_indexed(fit, &queries[i], solver, i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{DriftFamily, DriftModel};
    use crate::hazard::StepwiseHazard;
    use crate::optimize::FitMethod;

    fn fit(a: f64, b: f64, hazard: StepwiseHazard) -> FitResult {
        FitResult {
            method: FitMethod::Mle,
            drift: DriftModel::new(DriftFamily::Constant, 1, vec![a]).unwrap(),
            b_hat: vec![b],
            hazard_hat: hazard,
            loglik: 0.0,
            objective: 0.0,
            converged: true,
            iterations: 0,
            selection_mask: None,
            pilot_b: None,
            lambda: None,
            history: vec![],
        }
    }

    #[test]
    fn unit_hazard_is_exponential() {
        let f = fit(0.7, 0.0, StepwiseHazard::constant(1.0, 10.0).unwrap());
        for tp in [0.1, 1.0, 2.5] {
            let s = ltsr(&f, &ForecastQuery::new("q", vec![0.3], 0.5, tp), &SolverConfig::default())
                .unwrap();
            assert!((s.survival - (-tp).exp()).abs() < 1e-12);
            assert!(!s.extrapolated);
        }
        let tiny = ltsr(&f, &ForecastQuery::new("q", vec![0.3], 0.5, 1e-8), &SolverConfig::default())
            .unwrap();
        assert!(tiny.survival >= 1.0 - 1e-6);
    }

    #[test]
    fn linear_exponent_against_riemann_sum() {
        let (a, b, z, tp) = (0.8, 0.6, 0.4, 1.5);
        let f = fit(a, b, StepwiseHazard::constant(1.0, 10.0).unwrap());
        let n = 10_000;
        let dx = tp / n as f64;
        let integral: f64 = (0..n)
            .map(|k| (b * (z + a * (k as f64 + 0.5) * dx)).exp() * dx)
            .sum();
        let s = ltsr(&f, &ForecastQuery::new("q", vec![z], 0.0, tp), &SolverConfig::default()).unwrap();
        assert!((s.survival - (-integral).exp()).abs() < 1e-4);
    }

    #[test]
    fn flags_extrapolation_and_bad_queries() {
        let f = fit(0.0, 0.0, StepwiseHazard::constant(1.0, 2.0).unwrap());
        let s = ltsr(&f, &ForecastQuery::new("q", vec![0.0], 1.5, 1.0), &SolverConfig::default()).unwrap();
        assert!(s.extrapolated);
        assert!((s.survival - (-1.0f64).exp()).abs() < 1e-12);
        assert!(ltsr(&f, &ForecastQuery::new("q", vec![0.0], 0.0, 0.0), &SolverConfig::default()).is_err());
        assert!(ltsr(&f, &ForecastQuery::new("q", vec![0.0, 1.0], 0.0, 1.0), &SolverConfig::default()).is_err());
    }

    #[test]
    fn overflow_is_an_error() {
        let f = fit(100.0, 10.0, StepwiseHazard::constant(1.0, 2.0).unwrap());
        let err = ltsr(&f, &ForecastQuery::new("q", vec![0.0], 0.0, 5.0), &SolverConfig::default());
        assert!(matches!(err, Err(ForecastError::NonFiniteForecast { .. })));
    }
}
