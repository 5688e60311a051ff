//! Synthetic data from the joint model: a deterministic covariate path driven
//! by the drift from a random initial point, and an event time drawn from the
//! Cox hazard along that path.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal, StandardNormal};
use thiserror::Error;

use crate::drift::{solve_g_inverse_path, DriftError, DriftFamily, DriftModel, SolverConfig};
use crate::hazard::StepwiseHazard;
use crate::likelihood::TerminalRecord;
use crate::optimize::{PanelObservation, PanelRecord};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error("subject {subject}: cumulative hazard at t_max stayed below the exponential draw after {redraws} redraws")]
    HazardTooFlat { subject: usize, redraws: usize },
    #[error("thinning needs a constant drift")]
    UnsupportedThinning,
    #[error(transparent)]
    Drift(#[from] DriftError),
}

/// Baseline hazard `lambda_0`.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// `(e^10 + e^-t) / (e^10 + 1)`.
    Paper,
    ConstantOne,
    Custom(StepwiseHazard),
}

const E10: f64 = 22_026.465_794_806_718;

impl Baseline {
    pub fn rate(&self, t: f64) -> f64 {
        match self {
            Baseline::Paper => (E10 + (-t).exp()) / (E10 + 1.0),
            Baseline::ConstantOne => 1.0,
            Baseline::Custom(h) => h.eval(t),
        }
    }

    /// `Lambda_0(t)`.
    pub fn cumulative(&self, t: f64) -> f64 {
        match self {
            Baseline::Paper => (E10 * t + 1.0 - (-t).exp()) / (E10 + 1.0),
            Baseline::ConstantOne => t,
            Baseline::Custom(h) => h.cumulative(t),
        }
    }

    /// Upper bound of the rate on `[lo, hi]`.
    fn bound(&self, lo: f64, hi: f64) -> f64 {
        match self {
            // decreasing in t
            Baseline::Paper => self.rate(lo),
            Baseline::ConstantOne => 1.0,
            Baseline::Custom(h) => {
                let last = h.steps() - 1;
                (h.step_index(lo)..=h.step_index(hi))
                    .map(|k| h.heights()[k.min(last)])
                    .fold(0.0, f64::max)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialDistribution {
    StandardNormal,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    pub n: usize,
    pub drift: DriftModel,
    pub b0: Vec<f64>,
    pub baseline: Baseline,
    pub z0: InitialDistribution,
    pub seed: u64,
    pub t_max: f64,
    /// Redraws allowed per subject before giving up.
    pub redraw_budget: usize,
    /// Euler steps for non-constant drift paths over `[0, t_max]`.
    pub path_steps: usize,
}

/// Example 1 drift parameters.
pub const EXAMPLE1_A: [f64; 16] = [
    1.0, 0.5, -1.0, 0.3, 1.0, 0.5, -1.0, 0.3, 1.0, 0.5, -1.0, 0.3, 1.0, 0.5, -1.0, 0.3,
];

pub fn example1_b0() -> Vec<f64> {
    let mut b = vec![0.0; 16];
    b[..3].copy_from_slice(&[1.0, 1.0, -1.0]);
    b
}

impl SimDesign {
    /// `p = 16`, constant drift, three non-zero coefficients, the slowly
    /// decaying baseline, `Z_0 ~ N(0, I)`.
    pub fn example1(n: usize, seed: u64) -> Self {
        Self {
            n,
            drift: DriftModel::new(DriftFamily::Constant, 16, EXAMPLE1_A.to_vec())
                .expect("valid example drift"),
            b0: example1_b0(),
            baseline: Baseline::Paper,
            z0: InitialDistribution::StandardNormal,
            seed,
            t_max: 100.0,
            redraw_budget: 1000,
            path_steps: 4096,
        }
    }

    /// Zero coefficients, zero drift, unit hazard: `T ~ Exp(1)`.
    pub fn unit_exponential(n: usize, p: usize, seed: u64) -> Self {
        Self {
            n,
            drift: DriftModel::new(DriftFamily::Constant, p, vec![0.0; p]).expect("valid drift"),
            b0: vec![0.0; p],
            baseline: Baseline::ConstantOne,
            z0: InitialDistribution::StandardNormal,
            seed,
            t_max: 100.0,
            redraw_budget: 1000,
            path_steps: 4096,
        }
    }

    pub fn p(&self) -> usize {
        self.drift.p()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::Design("n must be at least 1".into()));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(SimError::Design("t_max must be positive".into()));
        }
        if self.b0.len() != self.p() || self.b0.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Design("b0 must be a finite p-vector".into()));
        }
        if let InitialDistribution::Fixed(z) = &self.z0 {
            if z.len() != self.p() {
                return Err(SimError::Design("fixed initial point has the wrong dimension".into()));
            }
        }
        if self.path_steps == 0 {
            return Err(SimError::Design("path_steps must be at least 1".into()));
        }
        Ok(())
    }

    fn rng(&self, subject: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((stream << 40) | subject as u64);
        rng
    }

    fn draw_z0(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.z0 {
            InitialDistribution::StandardNormal => {
                (0..self.p()).map(|_| StandardNormal.sample(rng)).collect()
            }
            InitialDistribution::Fixed(z) => z.clone(),
        }
    }
}

/// Covariate path from an initial point.
enum CovariatePath {
    Linear { z0: Vec<f64>, rate: Vec<f64> },
    Euler(crate::drift::Trajectory),
}

impl CovariatePath {
    fn new(design: &SimDesign, z0: Vec<f64>) -> Result<Self, SimError> {
        if design.drift.is_translation() {
            let mut rate = vec![0.0; design.p()];
            design.drift.rate(&z0, 0.0, &mut rate);
            Ok(CovariatePath::Linear { z0, rate })
        } else {
            let cfg = SolverConfig::with_steps(design.path_steps);
            Ok(CovariatePath::Euler(solve_g_inverse_path(
                &design.drift,
                &z0,
                0.0,
                design.t_max,
                &cfg,
            )?))
        }
    }

    fn at(&self, s: f64) -> Vec<f64> {
        match self {
            CovariatePath::Linear { z0, rate } => {
                z0.iter().zip(rate).map(|(z, r)| z + r * s).collect()
            }
            CovariatePath::Euler(traj) => traj.at(s),
        }
    }

    fn eta(&self, b: &[f64], s: f64) -> f64 {
        match self {
            CovariatePath::Linear { z0, rate } => {
                z0.iter().zip(rate).zip(b).map(|((z, r), bi)| bi * (z + r * s)).sum()
            }
            CovariatePath::Euler(traj) => traj.at(s).iter().zip(b).map(|(x, bi)| x * bi).sum(),
        }
    }
}

/// Trapezoid rule on `[lo, hi]` with successive panel doubling, accelerated
/// by Richardson extrapolation (Romberg) until two rows agree.
fn adaptive_trapezoid<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    const LEVELS: usize = 20;
    let mut prev = [0.0; LEVELS];
    let mut row = [0.0; LEVELS];
    let mut h = hi - lo;
    prev[0] = 0.5 * h * (f(lo) + f(hi));
    let mut panels = 1usize;
    for level in 1..LEVELS {
        panels *= 2;
        h *= 0.5;
        let added: f64 = (1..panels).step_by(2).map(|k| f(lo + k as f64 * h)).sum();
        row[0] = 0.5 * prev[0] + h * added;
        let mut factor = 1.0;
        for k in 1..=level {
            factor *= 4.0;
            row[k] = row[k - 1] + (row[k - 1] - prev[k - 1]) / (factor - 1.0);
        }
        let delta = (row[level] - prev[level - 1]).abs();
        if level >= 3 && delta <= 1e-13 * row[level].abs() {
            return row[level];
        }
        prev[..=level].copy_from_slice(&row[..=level]);
    }
    prev[LEVELS - 1]
}

const SEGMENT: f64 = 0.0625;

/// Event time solving `Lambda(T) = target`, or `None` if `Lambda(t_max) < target`.
fn invert_cumulative<F: Fn(f64) -> f64>(intensity: &F, target: f64, t_max: f64) -> Option<f64> {
    let mut acc = 0.0;
    let mut lo = 0.0;
    while lo < t_max {
        let hi = (lo + SEGMENT).min(t_max);
        let piece = adaptive_trapezoid(intensity, lo, hi);
        if acc + piece >= target {
            let need = target - acc;
            let (mut a, mut b) = (lo, hi);
            for _ in 0..60 {
                let mid = 0.5 * (a + b);
                if adaptive_trapezoid(intensity, lo, mid) < need {
                    a = mid;
                } else {
                    b = mid;
                }
                if b - a <= 1e-13 * b.max(1.0) {
                    break;
                }
            }
            return Some(0.5 * (a + b));
        }
        acc += piece;
        lo = hi;
    }
    None
}

struct Draw {
    t: f64,
    path: CovariatePath,
    redraws: usize,
}

fn draw_subject<S>(design: &SimDesign, subject: usize, sampler: S) -> Result<Draw, SimError>
where
    S: Fn(&CovariatePath, &mut ChaCha8Rng) -> Option<f64>,
{
    let mut rng = design.rng(subject, 0);
    for redraws in 0..=design.redraw_budget {
        let z0 = design.draw_z0(&mut rng);
        let path = CovariatePath::new(design, z0)?;
        if let Some(t) = sampler(&path, &mut rng) {
            return Ok(Draw {
                t,
                path,
                redraws,
            });
        }
    }
    Err(SimError::HazardTooFlat {
        subject,
        redraws: design.redraw_budget,
    })
}

fn inverse_transform(design: &SimDesign, path: &CovariatePath, rng: &mut ChaCha8Rng) -> Option<f64> {
    let e: f64 = Exp1.sample(rng);
    let intensity = |s: f64| design.baseline.rate(s) * path.eta(&design.b0, s).exp();
    invert_cumulative(&intensity, e, design.t_max)
}

fn to_record(i: usize, draw: &Draw) -> TerminalRecord {
    TerminalRecord {
        id: format!("s{:06}", i + 1),
        event_time: draw.t,
        z: draw.path.at(draw.t),
    }
}

/// Terminal records plus the number of subjects redrawn past `t_max`.
pub fn simulate_terminal_counted(design: &SimDesign) -> Result<(Vec<TerminalRecord>, usize), SimError> {
    design.validate()?;
    let draws = par::try_map(design.n, |i| {
        draw_subject(design, i, |path, rng| inverse_transform(design, path, rng))
    })?;
    let redraws = draws.iter().map(|d| d.redraws).sum();
    if redraws > 0 {
        info!("{redraws} draws beyond t_max = {} were redrawn", design.t_max);
    }
    let records = draws.iter().enumerate().map(|(i, d)| to_record(i, d)).collect();
    Ok((records, redraws))
}

pub fn simulate_terminal(design: &SimDesign) -> Result<Vec<TerminalRecord>, SimError> {
    Ok(simulate_terminal_counted(design)?.0)
}

/// Observation times as fractions of each subject's event time.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSchedule {
    pub fractions: Vec<f64>,
    /// Standard deviation of Gaussian noise added to every observation
    /// before the event (the event row stays exact).
    pub noise_sd: f64,
}

impl Default for PanelSchedule {
    fn default() -> Self {
        Self {
            fractions: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
            noise_sd: 0.0,
        }
    }
}

impl PanelSchedule {
    fn validate(&self) -> Result<Vec<f64>, SimError> {
        let mut f = self.fractions.clone();
        if f.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
            return Err(SimError::Design("schedule fractions must lie in [0, 1]".into()));
        }
        if f.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::Design("schedule fractions must increase strictly".into()));
        }
        if f.last() != Some(&1.0) {
            f.push(1.0);
        }
        if f.len() < 2 {
            return Err(SimError::Design("schedule needs at least two times".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(SimError::Design("noise_sd must be non-negative".into()));
        }
        Ok(f)
    }
}

/// Panels along the same paths as [`simulate_terminal`]; the last
/// observation of each panel is the terminal record.
pub fn simulate_panel(design: &SimDesign, schedule: &PanelSchedule) -> Result<Vec<PanelRecord>, SimError> {
    design.validate()?;
    let fractions = schedule.validate()?;
    let noise = Normal::new(0.0, schedule.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    par::try_map(design.n, |i| {
        let draw = draw_subject(design, i, |path, rng| inverse_transform(design, path, rng))?;
        let record = to_record(i, &draw);
        let mut rng = design.rng(i, 1);
        let last = fractions.len() - 1;
        let observations = fractions
            .iter()
            .enumerate()
            .map(|(k, f)| {
                if k == last {
                    return PanelObservation {
                        time: record.event_time,
                        z: record.z.clone(),
                    };
                }
                let time = f * draw.t;
                let mut z = draw.path.at(time);
                if schedule.noise_sd > 0.0 {
                    z.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                }
                PanelObservation { time, z }
            })
            .collect();
        PanelRecord::new(record.id, observations)
            .map_err(|e| SimError::Design(e.to_string()))
    })
}

/// Width of the windows over which thinning bounds the intensity.
const THINNING_WINDOW: f64 = 0.25;

/// Lewis-Shedler thinning with piecewise-constant bounds; constant drift only.
pub fn simulate_thinning_oracle(design: &SimDesign) -> Result<Vec<TerminalRecord>, SimError> {
    design.validate()?;
    if !design.drift.is_translation() {
        return Err(SimError::UnsupportedThinning);
    }
    let draws = par::try_map(design.n, |i| {
        draw_subject(design, i, |path, rng| {
            let CovariatePath::Linear { z0, rate } = path else {
                return None;
            };
            let eta0: f64 = z0.iter().zip(&design.b0).map(|(z, b)| z * b).sum();
            let slope: f64 = rate.iter().zip(&design.b0).map(|(r, b)| r * b).sum();
            let mut s = 0.0;
            let mut lo = 0.0;
            while lo < design.t_max {
                let hi = (lo + THINNING_WINDOW).min(design.t_max);
                let bound = design.baseline.bound(lo, hi) * (eta0 + (slope * lo).max(slope * hi)).exp();
                loop {
                    let gap: f64 = Exp1.sample(rng);
                    s += gap / bound;
                    if s >= hi {
                        s = hi;
                        break;
                    }
                    let intensity = design.baseline.rate(s) * (eta0 + slope * s).exp();
                    let u: f64 = rng.random();
                    if u * bound <= intensity {
                        return Some(s);
                    }
                }
                lo = hi;
            }
            None
        })
    })?;
    Ok(draws.iter().enumerate().map(|(i, d)| to_record(i, d)).collect())
}
