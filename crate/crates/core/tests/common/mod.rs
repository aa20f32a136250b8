#![allow(dead_code)]

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use smoothderiv::linalg;
use smoothderiv::model::{ProcessNoiseBase, TransitionMatrix};
use smoothderiv::{ModelOrder, ModelParams, TimeSeries};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn order(d: usize) -> ModelOrder {
    ModelOrder::new(d).unwrap()
}

pub fn random_spd(rng: &mut impl Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| normal(rng));
    (&b * b.transpose() + DMatrix::identity(d, d) * 0.1) * scale
}

pub fn random_params(rng: &mut impl Rng, d: usize) -> ModelParams {
    let p0 = random_spd(rng, d, 1.0);
    ModelParams::new(
        log_uniform(rng, 0.1, 10.0),
        log_uniform(rng, 0.01, 1.0),
        DVector::from_fn(d, |_, _| normal(rng)),
        linalg::cholesky(&p0).unwrap(),
    )
    .unwrap()
}

/// Draw a trajectory from the model and noisy measurements of it.
pub fn simulate(
    rng: &mut impl Rng,
    abscissas: &[f64],
    counts: &[usize],
    params: &ModelParams,
    order: ModelOrder,
) -> TimeSeries {
    let d = order.get();
    let draw = |rng: &mut ChaCha8Rng, l: &DMatrix<f64>| l * DVector::from_fn(d, |_, _| normal(rng));
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let mut x = &params.m0 + draw(&mut local, &params.p0_factor);
    let mut measurements = Vec::with_capacity(abscissas.len());
    for (k, &n) in counts.iter().enumerate() {
        if k > 0 {
            let dt = abscissas[k] - abscissas[k - 1];
            let a = TransitionMatrix::new(order, dt).unwrap();
            let qb = ProcessNoiseBase::new(order, dt).unwrap();
            x = a.matrix() * &x + draw(&mut local, qb.factor()) * params.q.sqrt();
        }
        let ys = (0..n)
            .map(|_| x[0] + params.r.sqrt() * normal(&mut local))
            .collect();
        measurements.push(ys);
    }
    TimeSeries::new(abscissas.to_vec(), measurements).unwrap()
}

pub struct Instance {
    pub ts: TimeSeries,
    pub params: ModelParams,
    pub order: ModelOrder,
}

/// Random abscissas with log-uniform steps and 0–3 measurements each (at least one overall).
pub fn random_instance(
    rng: &mut impl Rng,
    t_range: (usize, usize),
    orders: &[usize],
    dt_range: (f64, f64),
) -> Instance {
    let t_len = rng.random_range(t_range.0..=t_range.1);
    let d = orders[rng.random_range(0..orders.len())];
    let mut abscissas = vec![rng.random_range(-1.0..1.0)];
    for _ in 1..t_len {
        let dt = log_uniform(rng, dt_range.0, dt_range.1);
        abscissas.push(abscissas.last().unwrap() + dt);
    }
    let mut counts: Vec<usize> = (0..t_len).map(|_| rng.random_range(0..=3)).collect();
    if counts.iter().all(|&n| n == 0) {
        let k = rng.random_range(0..t_len);
        counts[k] = 1;
    }
    let params = random_params(rng, d);
    let ts = simulate(rng, &abscissas, &counts, &params, order(d));
    Instance {
        ts,
        params,
        order: order(d),
    }
}

/// Mean error relative to the reference mean or its spread, whichever is larger.
pub fn mean_error(mean: &DVector<f64>, reference: &DVector<f64>, ref_cov: &DMatrix<f64>) -> f64 {
    let scale = reference.norm().max(ref_cov.trace().max(0.0).sqrt());
    let diff = (mean - reference).norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn cov_error(cov: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    linalg::frobenius_rel(cov, reference)
}

pub fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn relative_rms(estimate: &[f64], truth: &[f64]) -> f64 {
    let err: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| a - b).collect();
    rms(&err) / rms(truth)
}

/// Sum of three sinusoids sampled uniformly on [0, 1] with relative Gaussian noise.
pub struct Benchmark {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    /// Signal, velocity and acceleration at `t`.
    pub truth: [Vec<f64>; 3],
    pub noise_level: f64,
}

pub const BENCHMARK_SAMPLES: usize = 94;

pub fn benchmark(seed: u64) -> Benchmark {
    let mut rng = rng(seed);
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..1.5),
                TAU * rng.random_range(0.5..2.5),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let n = BENCHMARK_SAMPLES;
    let t: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let eval = |s: f64, der: usize| -> f64 {
        comps
            .iter()
            .map(|&(a, w, ph)| match der {
                0 => a * (w * s + ph).sin(),
                1 => a * w * (w * s + ph).cos(),
                _ => -a * w * w * (w * s + ph).sin(),
            })
            .sum()
    };
    let truth = [0, 1, 2].map(|der| t.iter().map(|&s| eval(s, der)).collect::<Vec<_>>());
    let noise_level = rng.random_range(0.01..0.03);
    let sigma = noise_level * rms(&truth[0]);
    let y = truth[0].iter().map(|&x| x + sigma * normal(&mut rng)).collect();
    Benchmark {
        t,
        y,
        truth,
        noise_level,
    }
}

/// Central first and second differences at the interior samples of a uniform grid.
pub fn central_differences(t: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = t[1] - t[0];
    let n = y.len();
    let vel = (1..n - 1).map(|k| (y[k + 1] - y[k - 1]) / (2.0 * h)).collect();
    let acc = (1..n - 1)
        .map(|k| (y[k + 1] - 2.0 * y[k] + y[k - 1]) / (h * h))
        .collect();
    (vel, acc)
}
