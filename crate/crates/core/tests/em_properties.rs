mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smoothderiv::em::{em_step, init_params, minimize_q};
use smoothderiv::kalman::negative_log_likelihood;
use smoothderiv::{fit, EmConfig, Execution, ModelParams, TimeSeries};

fn sine_series(n: usize, noise: f64, seed: u64) -> (TimeSeries, Vec<f64>) {
    let mut rng = rng(seed);
    let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    let x: Vec<f64> = t.iter().map(|s| (1.3 * s).sin() + 0.2 * s).collect();
    let y: Vec<f64> = x.iter().map(|v| v + noise * normal(&mut rng)).collect();
    (TimeSeries::from_samples(&t, &y).unwrap(), x)
}

#[test]
fn noise_free_line_is_reproduced() {
    let t: Vec<f64> = (0..40).map(|i| 0.1 * i as f64).collect();
    let x: Vec<f64> = t.iter().map(|s| 1.5 - 0.75 * s).collect();
    let ts = TimeSeries::from_samples(&t, &x).unwrap();
    let rep = fit(&ts, order(2), &EmConfig::default()).unwrap();
    assert!(relative_rms(&rep.smoothed.displacement(), &x) < 1e-6);
    for m in &rep.smoothed.means {
        assert!((m[1] + 0.75).abs() < 1e-4);
    }
}

#[test]
fn q_search_is_close_to_fine_grid_minimum() {
    let d = 2;
    let mut rng = rng(17);
    let t: Vec<f64> = (0..200).map(|i| 0.1 * i as f64).collect();
    let truth = ModelParams::new(1.0, 0.05, DVector::zeros(d), DMatrix::identity(d, d) * 0.1).unwrap();
    let ts = simulate(&mut rng, &t, &vec![1; t.len()], &truth, order(d));
    let partial = init_params(&ts, order(d)).unwrap();
    let found = minimize_q(&ts, &partial, order(d), (-8.0, 8.0), Execution::Sequential).unwrap();

    let nll = |q: f64| {
        let mut p = partial.clone();
        p.q = q;
        negative_log_likelihood(&ts, &p, order(d)).unwrap()
    };
    let (best_q, _) = (0..=4000)
        .map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 4000.0))
        .map(|q| (q, nll(q)))
        .fold((f64::NAN, f64::INFINITY), |acc, (q, v)| if v < acc.1 { (q, v) } else { acc });
    let ratio = found.q / best_q;
    assert!((1.0 / 3.0..=3.0).contains(&ratio), "found {} vs grid {}", found.q, best_q);
    assert!(!found.at_boundary);
}

#[test]
fn fit_on_sine_improves_on_raw_data() {
    let (ts, x) = sine_series(120, 0.05, 3);
    let rep = fit(&ts, order(3), &EmConfig::default()).unwrap();
    let raw: Vec<f64> = ts.all_values().collect();
    assert!(relative_rms(&rep.smoothed.displacement(), &x) < relative_rms(&raw, &x));
    assert!(rep.converged);
}

fn scaled(ts: &TimeSeries, c: f64) -> TimeSeries {
    ts.scaled(c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fitted_parameters_are_scale_equivariant(k in -6i32..=6, seed in 0u64..1000, d in 1usize..=3) {
        let c = 2f64.powi(k);
        let (ts, x) = sine_series(50, 0.05, seed);
        let cfg = EmConfig { max_iters: 5, ..EmConfig::default() };
        let a = fit(&ts, order(d), &cfg).unwrap();
        let b = fit(&scaled(&ts, c), order(d), &cfg).unwrap();
        let rel = |u: f64, v: f64| (u - v).abs() / v.abs().max(f64::MIN_POSITIVE);
        prop_assert!(rel(b.params.q, c * c * a.params.q) < 1e-8);
        prop_assert!(rel(b.params.r, c * c * a.params.r) < 1e-8);
        prop_assert!((&b.params.m0 - &a.params.m0 * c).norm() <= 1e-8 * (c * a.params.m0.norm()).max(c));
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let ea = relative_rms(&a.smoothed.displacement(), &x);
        let eb = relative_rms(&b.smoothed.displacement(), &xs);
        prop_assert!((ea - eb).abs() < 1e-8);
    }

    #[test]
    fn em_step_does_not_increase_nll(seed in 0u64..10_000) {
        let mut rng = rng(seed);
        let inst = random_instance(&mut rng, (3, 25), &[1, 2, 3, 4], (0.05, 5.0));
        prop_assume!(inst.ts.total_measurements() >= 2);
        let before = negative_log_likelihood(&inst.ts, &inst.params, inst.order).unwrap();
        let next = em_step(&inst.ts, &inst.params, inst.order).unwrap();
        let after = negative_log_likelihood(&inst.ts, &next, inst.order).unwrap();
        prop_assert!(after <= before + 1e-9, "{after} > {before}");
    }
}
