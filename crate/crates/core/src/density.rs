//! Gaussian kernel estimate of the initial covariate density, built from the
//! terminal observations carried back to time zero.

use std::cmp::Ordering;
use std::f64::consts::PI;

use thiserror::Error;

use crate::drift::{solve_g, DriftError, DriftModel, SolverConfig};
use crate::likelihood::TerminalRecord;
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("kernel density needs at least {min} centers, got {got}")]
    TooFewCenters { min: usize, got: usize },
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("center {0} is not finite or has the wrong dimension")]
    Center(usize),
    #[error(transparent)]
    Drift(#[from] DriftError),
}

/// Default kernel width for `n` centers: `n^(-1/4)`.
pub fn default_bandwidth(n: usize) -> f64 {
    (n as f64).powf(-0.25)
}

/// Isotropic Gaussian mixture `(1/n) sum_i N(z; c_i, h^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDensity {
    /// Row-major `n x p`, sorted lexicographically.
    centers: Vec<f64>,
    n: usize,
    p: usize,
    bandwidth: f64,
    log_norm: f64,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

impl KernelDensity {
    pub fn from_centers(centers: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self, DensityError> {
        if centers.is_empty() {
            return Err(DensityError::TooFewCenters { min: 1, got: 0 });
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(DensityError::Bandwidth(bandwidth));
        }
        let p = centers[0].len();
        if let Some(i) = centers
            .iter()
            .position(|c| c.len() != p || c.iter().any(|x| !x.is_finite()))
        {
            return Err(DensityError::Center(i));
        }
        let mut sorted = centers;
        sorted.sort_by(|a, b| lex_cmp(a, b));
        let n = sorted.len();
        let log_norm = -(n as f64).ln() - 0.5 * p as f64 * (2.0 * PI * bandwidth * bandwidth).ln();
        Ok(Self {
            centers: sorted.into_iter().flatten().collect(),
            n,
            p,
            bandwidth,
            log_norm,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn centers(&self) -> impl Iterator<Item = &[f64]> {
        self.centers.chunks_exact(self.p)
    }

    /// `log p(z)` by log-sum-exp over the kernels, in sorted-center order.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let scale = -0.5 / (self.bandwidth * self.bandwidth);
        let mut max = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(self.n);
        for c in self.centers() {
            let d2: f64 = c.iter().zip(z).map(|(ci, zi)| (ci - zi) * (ci - zi)).sum();
            let e = scale * d2;
            max = max.max(e);
            exps.push(e);
        }
        let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        self.log_norm + max + sum.ln()
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        self.log_density(z).exp()
    }
}

/// Kernel estimate of the initial density under drift `model`: each terminal
/// observation is carried back to time zero and used as a kernel center.
pub fn build_initial_density(
    model: &DriftModel,
    data: &[TerminalRecord],
    cfg: &SolverConfig,
) -> Result<KernelDensity, DensityError> {
    build_initial_density_with(model, data, cfg, None)
}

pub fn build_initial_density_with(
    model: &DriftModel,
    data: &[TerminalRecord],
    cfg: &SolverConfig,
    bandwidth: Option<f64>,
) -> Result<KernelDensity, DensityError> {
    if data.len() < 2 {
        return Err(DensityError::TooFewCenters {
            min: 2,
            got: data.len(),
        });
    }
    let centers = par::try_map(data.len(), |i| {
        let rec = &data[i];
        solve_g(model, &rec.z, rec.event_time, cfg).map(|traj| traj.end().to_vec())
    })?;
    let h = bandwidth.unwrap_or_else(|| default_bandwidth(data.len()));
    KernelDensity::from_centers(centers, h)
}
