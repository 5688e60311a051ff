//! Drift families and the Euler flow of the covariate path.
//!
//! The longitudinal covariate follows `dZ/ds = q(Z, s | a)`. Observed at the
//! event `(z, t)`, the path is recovered backwards by integrating
//! `z'(s) = -q(z(s), t - s | a)` from `z(0) = z`; `g(z, t, s | a)` is the point
//! reached after running that backward flow for duration `s`. The forward
//! flow (`g_inverse`) pushes a point from time `s` ahead by `t`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriftError {
    #[error("drift parameter vector has length {got}, family {family} expects {expected}")]
    ParamLength {
        family: DriftFamily,
        expected: usize,
        got: usize,
    },
    #[error("temporal coordinate {index} is out of range for p = {p}")]
    TemporalIndex { index: usize, p: usize },
    #[error("state dimension {got} does not match covariate dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite drift parameter at index {0}")]
    NonFiniteParameter(usize),
    #[error("trajectory left the finite range at step {step}")]
    NonFiniteState { step: usize },
    #[error("flow Jacobian lost orientation at step {step} (det = {det})")]
    SingularFlow { step: usize, det: f64 },
    #[error("unknown drift family `{0}`")]
    UnknownFamily(String),
}

/// Parametric family of the conditional increment rate `q(z, t | a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftFamily {
    /// `q(z, t | a) = a`.
    Constant,
    /// `q(z, t | a) = c + A z` with `a = (c, vec(A))`, `A` row-major.
    LinearInZ,
}

impl DriftFamily {
    /// Number of drift parameters when the drift acts on `k` coordinates.
    pub fn param_dim(self, k: usize) -> usize {
        match self {
            DriftFamily::Constant => k,
            DriftFamily::LinearInZ => k + k * k,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DriftFamily::Constant => "constant",
            DriftFamily::LinearInZ => "linear-in-z",
        }
    }
}

impl fmt::Display for DriftFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DriftFamily {
    type Err = DriftError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(DriftFamily::Constant),
            "linear-in-z" | "linear_in_z" | "linearinz" | "linear" => Ok(DriftFamily::LinearInZ),
            other => Err(DriftError::UnknownFamily(other.to_string())),
        }
    }
}

/// A drift family together with its parameters.
///
/// The drift acts on the `temporal` coordinates only; every other coordinate
/// of the covariate vector has zero drift and stays constant along the path.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftModel {
    family: DriftFamily,
    p: usize,
    temporal: Vec<usize>,
    a: Vec<f64>,
}

impl DriftModel {
    /// Drift acting on all `p` coordinates.
    pub fn new(family: DriftFamily, p: usize, a: Vec<f64>) -> Result<Self, DriftError> {
        Self::with_temporal(family, p, (0..p).collect(), a)
    }

    pub fn with_temporal(
        family: DriftFamily,
        p: usize,
        temporal: Vec<usize>,
        a: Vec<f64>,
    ) -> Result<Self, DriftError> {
        if let Some(&index) = temporal.iter().find(|&&i| i >= p) {
            return Err(DriftError::TemporalIndex { index, p });
        }
        let expected = family.param_dim(temporal.len());
        if a.len() != expected {
            return Err(DriftError::ParamLength {
                family,
                expected,
                got: a.len(),
            });
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(DriftError::NonFiniteParameter(i));
        }
        Ok(Self {
            family,
            p,
            temporal,
            a,
        })
    }

    /// All-zero parameters for the family.
    pub fn zeros(family: DriftFamily, p: usize, temporal: Vec<usize>) -> Result<Self, DriftError> {
        let d = family.param_dim(temporal.len());
        Self::with_temporal(family, p, temporal, vec![0.0; d])
    }

    pub fn family(&self) -> DriftFamily {
        self.family
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn temporal(&self) -> &[usize] {
        &self.temporal
    }

    pub fn params(&self) -> &[f64] {
        &self.a
    }

    pub fn param_dim(&self) -> usize {
        self.a.len()
    }

    /// Same family and coordinates, new parameters.
    pub fn with_params(&self, a: &[f64]) -> Result<Self, DriftError> {
        Self::with_temporal(self.family, self.p, self.temporal.clone(), a.to_vec())
    }

    /// True when `q` does not depend on `z` (the flow is a translation).
    pub fn is_translation(&self) -> bool {
        matches!(self.family, DriftFamily::Constant)
    }

    /// Writes `q(z, t | a)` into `out`.
    pub fn rate(&self, z: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let k = self.temporal.len();
        match self.family {
            DriftFamily::Constant => {
                for (slot, &coord) in self.temporal.iter().enumerate() {
                    out[coord] = self.a[slot];
                }
            }
            DriftFamily::LinearInZ => {
                let matrix = &self.a[k..];
                for (row, &coord) in self.temporal.iter().enumerate() {
                    let mut acc = self.a[row];
                    for (col, &src) in self.temporal.iter().enumerate() {
                        acc += matrix[row * k + col] * z[src];
                    }
                    out[coord] = acc;
                }
            }
        }
    }

    /// Writes the `p x p` row-major gradient `dq/dz` into `out`.
    pub fn rate_gradient(&self, _z: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let DriftFamily::LinearInZ = self.family {
            let k = self.temporal.len();
            let matrix = &self.a[k..];
            for (row, &r) in self.temporal.iter().enumerate() {
                for (col, &c) in self.temporal.iter().enumerate() {
                    out[r * self.p + c] = matrix[row * k + col];
                }
            }
        }
    }

    fn check_state(&self, z: &[f64]) -> Result<(), DriftError> {
        if z.len() != self.p {
            return Err(DriftError::Dimension {
                expected: self.p,
                got: z.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OdeMethod {
    #[default]
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub steps_per_trajectory: usize,
    pub method: OdeMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps_per_trajectory: 64,
            method: OdeMethod::Euler,
        }
    }
}

impl SolverConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps_per_trajectory: steps.max(1),
            ..Self::default()
        }
    }

    fn steps_for(&self, horizon: f64) -> usize {
        if horizon == 0.0 {
            0
        } else {
            self.steps_per_trajectory.max(1)
        }
    }
}

/// Euler polygon of one flow: `values[k]` is the state at `grid[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub origin: Vec<f64>,
    pub horizon: f64,
    pub grid: Vec<f64>,
    values: Vec<f64>,
    /// Running log-determinant of the flow Jacobian; empty unless requested.
    pub jac_log: Vec<f64>,
    p: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.values[k * self.p..(k + 1) * self.p]
    }

    pub fn end(&self) -> &[f64] {
        self.point(self.grid.len() - 1)
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.p)
    }

    /// `b . state` at every grid point.
    pub fn project(&self, b: &[f64]) -> Vec<f64> {
        self.points()
            .map(|x| x.iter().zip(b).map(|(xi, bi)| xi * bi).sum())
            .collect()
    }

    /// State at `s` on the piecewise-linear Euler polygon (clamped to the grid).
    pub fn at(&self, s: f64) -> Vec<f64> {
        let last = self.grid.len() - 1;
        if last == 0 || s <= self.grid[0] {
            return self.point(0).to_vec();
        }
        if s >= self.grid[last] {
            return self.point(last).to_vec();
        }
        let k = self.grid.partition_point(|&g| g <= s) - 1;
        let (g0, g1) = (self.grid[k], self.grid[k + 1]);
        let w = (s - g0) / (g1 - g0);
        self.point(k)
            .iter()
            .zip(self.point(k + 1))
            .map(|(x0, x1)| x0 + w * (x1 - x0))
            .collect()
    }
}

fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    let h = horizon / steps.max(1) as f64;
    let mut grid: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
    if let Some(last) = grid.last_mut() {
        *last = horizon;
    }
    grid
}

/// Integrates `x'(u) = sign * q(x(u), clock(u))` on a uniform grid over
/// `[0, horizon]`, optionally accumulating the log-determinant of the flow.
fn integrate(
    model: &DriftModel,
    start: &[f64],
    horizon: f64,
    cfg: &SolverConfig,
    sign: f64,
    clock: impl Fn(f64) -> f64,
    with_jacobian: bool,
) -> Result<Trajectory, DriftError> {
    model.check_state(start)?;
    let p = model.p;
    let steps = cfg.steps_for(horizon);
    let grid = uniform_grid(horizon, steps);
    let mut values = Vec::with_capacity((steps + 1) * p);
    values.extend_from_slice(start);
    let mut jac_log = Vec::new();
    if with_jacobian {
        jac_log.reserve(steps + 1);
        jac_log.push(0.0);
    }

    if model.is_translation() {
        // Euler is exact for a constant right-hand side.
        let mut rate = vec![0.0; p];
        model.rate(start, 0.0, &mut rate);
        for &u in &grid[1..] {
            values.extend(start.iter().zip(&rate).map(|(x, q)| x + sign * q * u));
        }
        if with_jacobian {
            jac_log.resize(grid.len(), 0.0);
        }
    } else {
        let mut state = start.to_vec();
        let mut rate = vec![0.0; p];
        let mut grad = vec![0.0; p * p];
        let temporal = &model.temporal;
        let kdim = temporal.len();
        let mut running = 0.0;
        for step in 0..steps {
            let u = grid[step];
            let h = grid[step + 1] - u;
            let time = clock(u);
            if with_jacobian {
                model.rate_gradient(&state, time, &mut grad);
                // Step map derivative is I + sign*h*dq/dz; only the temporal
                // block differs from the identity.
                let block = DMatrix::from_fn(kdim, kdim, |r, c| {
                    let id = if r == c { 1.0 } else { 0.0 };
                    id + sign * h * grad[temporal[r] * p + temporal[c]]
                });
                let det = if kdim == 0 { 1.0 } else { block.determinant() };
                if !(det > 0.0) || !det.is_finite() {
                    return Err(DriftError::SingularFlow { step, det });
                }
                running += det.ln();
                jac_log.push(running);
            }
            model.rate(&state, time, &mut rate);
            for (x, q) in state.iter_mut().zip(&rate) {
                *x += sign * h * q;
            }
            if state.iter().any(|x| !x.is_finite()) {
                return Err(DriftError::NonFiniteState { step: step + 1 });
            }
            values.extend_from_slice(&state);
        }
    }

    if values.iter().any(|x| !x.is_finite()) {
        return Err(DriftError::NonFiniteState { step: 0 });
    }
    Ok(Trajectory {
        origin: start.to_vec(),
        horizon,
        grid,
        values,
        jac_log,
        p,
    })
}

fn check_time(value: f64) -> Result<(), DriftError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(DriftError::NonFiniteState { step: 0 })
    }
}

/// Backward trajectory `s -> g(z, t, s | a)` on `M` uniform steps over `[0, t]`.
pub fn solve_g(
    model: &DriftModel,
    z: &[f64],
    t: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory, DriftError> {
    check_time(t)?;
    integrate(model, z, t, cfg, -1.0, |s| t - s, false)
}

/// As [`solve_g`], also filling `jac_log` with the running log-determinant of
/// `z -> g(z, t, s | a)`.
pub fn solve_g_with_jacobian(
    model: &DriftModel,
    z: &[f64],
    t: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory, DriftError> {
    check_time(t)?;
    integrate(model, z, t, cfg, -1.0, |s| t - s, true)
}

/// Forward trajectory from `(z, s)` over duration `t`; `grid` holds elapsed
/// time `tau` in `[0, t]` and the state is the covariate at `s + tau`.
pub fn solve_g_inverse_path(
    model: &DriftModel,
    z: &[f64],
    s: f64,
    t: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory, DriftError> {
    check_time(s)?;
    check_time(t)?;
    integrate(model, z, t, cfg, 1.0, |tau| s + tau, false)
}

/// `g_inverse(z, s, t | a)`: the point that the backward flow from time
/// `s + t` carries onto `z` after duration `t`.
pub fn solve_g_inverse(
    model: &DriftModel,
    z: &[f64],
    s: f64,
    t: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>, DriftError> {
    Ok(solve_g_inverse_path(model, z, s, t, cfg)?.end().to_vec())
}

/// `log det` of the Jacobian of `z -> g(z, t, t | a)`.
pub fn jacobian_logdet(
    model: &DriftModel,
    z: &[f64],
    t: f64,
    cfg: &SolverConfig,
) -> Result<f64, DriftError> {
    if model.is_translation() || t == 0.0 {
        model.check_state(z)?;
        check_time(t)?;
        return Ok(0.0);
    }
    let traj = solve_g_with_jacobian(model, z, t, cfg)?;
    Ok(*traj.jac_log.last().unwrap_or(&0.0))
}
