use coxflow::drift::{jacobian_logdet, solve_g, solve_g_inverse, DriftFamily, DriftModel, SolverConfig};
use coxflow::hazard::StepwiseHazard;
use coxflow::likelihood::{full_loglik, ParameterProfile, TerminalRecord};
use coxflow::optimize::{FitMethod, FitResult};
use coxflow::report::selection_metrics;
use coxflow::{ltsr, profile_thetas, ForecastQuery};
use proptest::prelude::*;

fn records(times: &[f64], zs: &[f64]) -> Vec<TerminalRecord> {
    times
        .iter()
        .zip(zs.chunks(2))
        .enumerate()
        .map(|(i, (t, z))| TerminalRecord::new(format!("r{i}"), *t, z.to_vec()).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_flow_round_trips(
        a in prop::collection::vec(-2.0..2.0f64, 3),
        z in prop::collection::vec(-3.0..3.0f64, 3),
        t in 0.0..5.0f64,
    ) {
        let model = DriftModel::new(DriftFamily::Constant, 3, a.clone()).unwrap();
        let cfg = SolverConfig::default();
        let back = solve_g(&model, &z, t, &cfg).unwrap();
        let forward = solve_g_inverse(&model, back.end(), 0.0, t, &cfg).unwrap();
        for k in 0..3 {
            prop_assert!((back.end()[k] - (z[k] - a[k] * t)).abs() <= 1e-12 * (1.0 + z[k].abs() + (a[k] * t).abs()));
            prop_assert!((forward[k] - z[k]).abs() <= 1e-12 * (1.0 + z[k].abs() + (a[k] * t).abs()));
        }
        prop_assert_eq!(jacobian_logdet(&model, &z, t, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn profiled_heights_are_stationary(
        times in prop::collection::vec(0.05..4.0f64, 6..12),
        seed_z in prop::collection::vec(-1.0..1.0f64, 24),
        b in prop::collection::vec(-1.0..1.0f64, 2),
        a in prop::collection::vec(-0.5..0.5f64, 2),
    ) {
        let data = records(&times, &seed_z);
        let drift = DriftModel::new(DriftFamily::Constant, 2, a).unwrap();
        let cfg = SolverConfig::default();
        let hazard = profile_thetas(&drift, &b, &data, &cfg).unwrap();
        prop_assert!(hazard.heights().iter().all(|h| *h > 0.0 && h.is_finite()));
        let value = |heights: Vec<f64>| {
            let profile = ParameterProfile {
                drift: drift.clone(),
                b: b.clone(),
                hazard: StepwiseHazard::new(hazard.knots().to_vec(), heights).unwrap(),
            };
            full_loglik(&profile, &data, &cfg).unwrap().total
        };
        let base = hazard.heights().to_vec();
        let f0 = value(base.clone());
        // every height except the carried-forward last one
        for k in 1..base.len() - 1 {
            let mut up = base.clone();
            up[k] *= 1.0 + 1e-4;
            let mut down = base.clone();
            down[k] *= 1.0 - 1e-4;
            let grad = (value(up) - value(down)) / (2e-4 * base[k]);
            prop_assert!(grad.abs() * base[k] <= 1e-6 * (1.0 + f0.abs()), "k = {k}, grad = {grad}");
        }
    }

    #[test]
    fn cumulative_hazard_is_monotone(
        gaps in prop::collection::vec(0.01..1.0f64, 1..10),
        heights in prop::collection::vec(0.0..3.0f64, 10),
        probes in prop::collection::vec(0.0..12.0f64, 2..20),
    ) {
        let mut knots = vec![0.0];
        for g in &gaps {
            knots.push(knots.last().unwrap() + g);
        }
        let h = StepwiseHazard::new(knots.clone(), heights[..knots.len() - 1].to_vec()).unwrap();
        let mut probes = probes;
        probes.sort_by(f64::total_cmp);
        let values: Vec<f64> = probes.iter().map(|t| h.cumulative(*t)).collect();
        prop_assert!(values.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn survival_is_a_decreasing_probability(
        a in -1.0..1.0f64,
        b in -1.0..1.0f64,
        z in -2.0..2.0f64,
        t in 0.0..2.0f64,
        t1 in 0.01..2.0f64,
        extra in 0.01..2.0f64,
    ) {
        let fit = FitResult {
            method: FitMethod::Mle,
            drift: DriftModel::new(DriftFamily::Constant, 1, vec![a]).unwrap(),
            b_hat: vec![b],
            hazard_hat: StepwiseHazard::new(vec![0.0, 0.5, 1.5], vec![0.5, 1.5]).unwrap(),
            loglik: 0.0,
            objective: 0.0,
            converged: true,
            iterations: 0,
            selection_mask: None,
            pilot_b: None,
            lambda: None,
            history: vec![],
        };
        let cfg = SolverConfig::default();
        let s1 = ltsr(&fit, &ForecastQuery::new("q", vec![z], t, t1), &cfg).unwrap().survival;
        let s2 = ltsr(&fit, &ForecastQuery::new("q", vec![z], t, t1 + extra), &cfg).unwrap().survival;
        prop_assert!((0.0..=1.0).contains(&s1));
        prop_assert!(s2 <= s1 + 1e-15);
    }

    #[test]
    fn fit_classes_partition_replications(
        masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 1..30),
    ) {
        let b0 = [1.0, 0.0, -1.0, 0.0, 0.0, 2.0];
        let m = selection_metrics(&masks, &b0);
        prop_assert!((m.u_fit + m.c_fit + m.o_fit - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=3.0).contains(&m.c) && (0.0..=3.0).contains(&m.ic));
        prop_assert!(m.ic > 0.0 || m.u_fit == 0.0);
    }
}
