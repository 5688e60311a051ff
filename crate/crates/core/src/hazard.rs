//! Stepwise baseline hazard, step-restricted exposure integrals and the
//! first-order-condition profile of the step heights.

use thiserror::Error;

use crate::drift::{solve_g, DriftModel, SolverConfig};
use crate::likelihood::{LikelihoodError, SortedSample, TerminalRecord};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HazardError {
    #[error("hazard needs at least one step")]
    Empty,
    #[error("knots must start at 0 and increase strictly (violation at index {0})")]
    Knots(usize),
    #[error("{heights} heights for {knots} knots")]
    Shape { knots: usize, heights: usize },
    #[error("step height {index} is negative or non-finite ({value})")]
    Height { index: usize, value: f64 },
}

/// Right-continuous step function `sum_i theta_i 1[t_{i-1}, t_i)(t)` with the
/// last height carried forward beyond the last knot.
#[derive(Debug, Clone, PartialEq)]
pub struct StepwiseHazard {
    knots: Vec<f64>,
    heights: Vec<f64>,
}

impl StepwiseHazard {
    pub fn new(knots: Vec<f64>, heights: Vec<f64>) -> Result<Self, HazardError> {
        if heights.is_empty() {
            return Err(HazardError::Empty);
        }
        if knots.len() != heights.len() + 1 {
            return Err(HazardError::Shape {
                knots: knots.len(),
                heights: heights.len(),
            });
        }
        if knots[0] != 0.0 {
            return Err(HazardError::Knots(0));
        }
        for i in 1..knots.len() {
            if !(knots[i] > knots[i - 1]) || !knots[i].is_finite() {
                return Err(HazardError::Knots(i));
            }
        }
        if let Some((index, &value)) = heights
            .iter()
            .enumerate()
            .find(|(_, h)| !(h.is_finite() && **h >= 0.0))
        {
            return Err(HazardError::Height { index, value });
        }
        Ok(Self { knots, heights })
    }

    /// `lambda(t) = value` on `[0, horizon)` and (by extension) beyond.
    pub fn constant(value: f64, horizon: f64) -> Result<Self, HazardError> {
        Self::new(vec![0.0, horizon], vec![value])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn steps(&self) -> usize {
        self.heights.len()
    }

    pub fn last_knot(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Index of the step holding `t` (right-continuous); `steps()` marks the
    /// extension beyond the last knot.
    pub fn step_index(&self, t: f64) -> usize {
        self.knots.partition_point(|&k| k <= t).saturating_sub(1)
    }

    fn height(&self, step: usize) -> f64 {
        self.heights[step.min(self.heights.len() - 1)]
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.height(self.step_index(t))
    }

    /// Left limit `lambda(t-)`; at `t = 0` the first height.
    pub fn left_limit(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k < t).saturating_sub(1);
        self.height(idx)
    }

    /// `int_0^t lambda`.
    pub fn cumulative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (i, &h) in self.heights.iter().enumerate() {
            let (lo, hi) = (self.knots[i], self.knots[i + 1]);
            if t <= lo {
                return acc;
            }
            acc += h * (t.min(hi) - lo);
        }
        let last = self.last_knot();
        if t > last {
            acc += self.height(self.steps()) * (t - last);
        }
        acc
    }

    /// End of the at-risk window used by the likelihood for an event at `t`:
    /// when `t` sits on a knot the step that closes at `t` is left out,
    /// otherwise the window runs to `t`.
    pub fn risk_horizon(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k < t);
        if idx > 0 && idx < self.knots.len() && self.knots[idx] == t {
            self.knots[idx - 1]
        } else {
            t
        }
    }

    /// `(t, Lambda(t))` at every knot.
    pub fn cumulative_at_knots(&self) -> Vec<(f64, f64)> {
        let mut acc = 0.0;
        let mut rows = Vec::with_capacity(self.knots.len());
        rows.push((0.0, 0.0));
        for (i, &h) in self.heights.iter().enumerate() {
            acc += h * (self.knots[i + 1] - self.knots[i]);
            rows.push((self.knots[i + 1], acc));
        }
        rows
    }

    /// Two-column CSV `t,cumulative_hazard` at the knots.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,cumulative_hazard\n");
        for (t, c) in self.cumulative_at_knots() {
            out.push_str(&crate::io::fmt_f64(t));
            out.push(',');
            out.push_str(&crate::io::fmt_f64(c));
            out.push('\n');
        }
        out
    }
}

/// Largest exponent accepted inside `exp(b . g)`.
pub const EXPONENT_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("exponent {0} exceeds the overflow clamp")]
pub struct ExponentOverflow(pub f64);

/// Trapezoid integrals of `exp(eta(s))` over the hazard steps intersecting
/// `[from, upto]`.
///
/// `eta` is piecewise linear through `(path_s[m], path_eta[m])` (`path_s`
/// ascending; values outside are clamped). Quadrature nodes are the path
/// nodes plus the knots inside the window plus both window ends. On return
/// `out[k]` holds the integral over step `k`; index `knots.len() - 1` is the
/// extension beyond the last knot. `out` is truncated after the last step
/// touched.
pub fn step_exposures(
    path_s: &[f64],
    path_eta: &[f64],
    knots: &[f64],
    from: f64,
    upto: f64,
    out: &mut Vec<f64>,
) -> Result<(), ExponentOverflow> {
    out.clear();
    if !(upto > from) {
        return Ok(());
    }
    let last_path = path_s.len() - 1;
    let eta_at = |s: f64, hint: &mut usize| -> f64 {
        if s <= path_s[0] || last_path == 0 {
            return path_eta[0];
        }
        if s >= path_s[last_path] {
            return path_eta[last_path];
        }
        while *hint + 1 < last_path && path_s[*hint + 1] <= s {
            *hint += 1;
        }
        let (s0, s1) = (path_s[*hint], path_s[*hint + 1]);
        let w = (s - s0) / (s1 - s0);
        path_eta[*hint] + w * (path_eta[*hint + 1] - path_eta[*hint])
    };
    let weight = |eta: f64| -> Result<f64, ExponentOverflow> {
        if eta > EXPONENT_CLAMP || eta.is_nan() {
            Err(ExponentOverflow(eta))
        } else {
            Ok(eta.exp())
        }
    };

    let steps = knots.len() - 1;
    let mut step = knots.partition_point(|&k| k <= from).saturating_sub(1);
    let mut next_knot = step + 1;
    let mut path_i = path_s.partition_point(|&s| s <= from);
    let mut hint = 0usize;

    let mut s0 = from;
    let mut w0 = weight(eta_at(from, &mut hint))?;
    out.resize(step + 1, 0.0);
    loop {
        let cand_knot = if next_knot <= steps {
            knots[next_knot]
        } else {
            f64::INFINITY
        };
        let cand_path = if path_i <= last_path {
            path_s[path_i]
        } else {
            f64::INFINITY
        };
        let s1 = cand_knot.min(cand_path).min(upto);
        let w1 = if s1 == cand_path && s1 < upto && cand_path < cand_knot {
            weight(path_eta[path_i])?
        } else {
            weight(eta_at(s1, &mut hint))?
        };
        if s1 > s0 {
            out[step] += 0.5 * (s1 - s0) * (w0 + w1);
        }
        if s1 >= upto {
            break;
        }
        if s1 == cand_path {
            path_i += 1;
        }
        if s1 == cand_knot {
            next_knot += 1;
            step = (step + 1).min(steps);
            if out.len() < step + 1 {
                out.resize(step + 1, 0.0);
            }
        }
        s0 = s1;
        w0 = w1;
    }
    Ok(())
}

/// Profile of the step heights at `(a, b)`: each `theta_i` is the reciprocal of
/// the exposure accumulated over `[t_{i-1}, t_i)` by the subjects still at risk
/// after `t_i`. The last height repeats the one before it.
pub fn profile_thetas(
    model: &DriftModel,
    b: &[f64],
    data: &[TerminalRecord],
    cfg: &SolverConfig,
) -> Result<StepwiseHazard, LikelihoodError> {
    let sample = SortedSample::new(data)?;
    let etas = par::try_map(sample.len(), |i| {
        let rec = sample.record(i);
        let traj = solve_g(model, &rec.z, rec.event_time, cfg)?;
        Ok::<_, LikelihoodError>(sample.path_eta(i, &traj, b))
    })?;
    let exposures = sample.exposures(&etas)?;
    Ok(sample.profile(&exposures)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn knots012() -> StepwiseHazard {
        StepwiseHazard::new(vec![0.0, 1.0, 2.0], vec![1.0, 3.0]).unwrap()
    }

    #[test]
    fn evaluation_is_right_continuous() {
        let h = knots012();
        assert_eq!(h.eval(0.0), 1.0);
        assert_eq!(h.eval(0.5), 1.0);
        assert_eq!(h.eval(1.0), 3.0);
        assert_eq!(h.eval(1.999), 3.0);
        assert_eq!(h.eval(7.0), 3.0);
        assert_eq!(h.left_limit(1.0), 1.0);
        assert_eq!(h.left_limit(0.0), 1.0);
        assert_eq!(h.left_limit(2.0), 3.0);
    }

    #[test]
    fn cumulative_is_rectangle_area() {
        let h = knots012();
        assert_eq!(h.cumulative(0.0), 0.0);
        assert_eq!(h.cumulative(2.0), 4.0);
        assert_eq!(h.cumulative(1.5), 2.5);
        assert_eq!(h.cumulative(3.0), 7.0);
        let flat = StepwiseHazard::new(vec![0.0, 0.3, 0.9, 2.0], vec![2.0; 3]).unwrap();
        for t in [0.0, 0.1, 0.3, 0.5, 1.9] {
            assert_eq!(flat.eval(t), 2.0);
        }
    }

    #[test]
    fn cumulative_matches_riemann_sum() {
        let h = StepwiseHazard::new(vec![0.0, 0.25, 0.7, 1.3, 2.0], vec![0.5, 2.0, 1.25, 3.0])
            .unwrap();
        // Knots fall on Riemann cell boundaries, so the midpoint sum is exact
        // up to rounding.
        let n = 10_000;
        let t = 2.0;
        let dx = t / n as f64;
        let riemann: f64 = (0..n).map(|i| h.eval((i as f64 + 0.5) * dx) * dx).sum();
        assert!((riemann - h.cumulative(t)).abs() < 1e-9);
    }

    #[test]
    fn risk_horizon_drops_the_closing_step() {
        let h = knots012();
        assert_eq!(h.risk_horizon(1.0), 0.0);
        assert_eq!(h.risk_horizon(2.0), 1.0);
        assert_eq!(h.risk_horizon(1.5), 1.5);
        assert_eq!(h.risk_horizon(5.0), 5.0);
    }

    #[test]
    fn rejects_invalid_shapes() {
        assert!(StepwiseHazard::new(vec![0.0, 1.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(StepwiseHazard::new(vec![0.5, 1.0], vec![1.0]).is_err());
        assert!(StepwiseHazard::new(vec![0.0, 1.0], vec![-1.0]).is_err());
        assert!(StepwiseHazard::new(vec![0.0, 1.0], vec![]).is_err());
    }

    #[test]
    fn exposures_of_a_linear_exponent() {
        // eta(s) = 0.5 s on [0, 2]; steps [0, 0.7), [0.7, 1.2), [1.2, 3).
        let path_s: Vec<f64> = (0..=64).map(|k| 2.0 * k as f64 / 64.0).collect();
        let eta: Vec<f64> = path_s.iter().map(|s| 0.5 * s).collect();
        let knots = [0.0, 0.7, 1.2, 3.0];
        let mut out = Vec::new();
        step_exposures(&path_s, &eta, &knots, 0.0, 2.0, &mut out).unwrap();
        assert_eq!(out.len(), 3);
        let exact = |a: f64, b: f64| 2.0 * ((0.5 * b).exp() - (0.5 * a).exp());
        assert!((out[0] - exact(0.0, 0.7)).abs() < 1e-4);
        assert!((out[1] - exact(0.7, 1.2)).abs() < 1e-4);
        assert!((out[2] - exact(1.2, 2.0)).abs() < 1e-4);

        step_exposures(&path_s, &eta, &knots, 0.7, 1.2, &mut out).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - exact(0.7, 1.2)).abs() < 1e-4);
    }

    #[test]
    fn exposures_flag_overflow() {
        let path_s = [0.0, 1.0];
        let eta = [0.0, 800.0];
        let mut out = Vec::new();
        assert!(step_exposures(&path_s, &eta, &[0.0, 2.0], 0.0, 1.0, &mut out).is_err());
    }
}
