//! Square-root Kalman filter (the forward pass of the smoother).
//!
//! Covariances are carried as lower-triangular Cholesky factors and updated
//! with orthogonal triangularisations of stacked "pre-arrays", so a
//! covariance is never formed and then refactored. The filter also
//! accumulates the exact negative log-likelihood from the innovations.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModelOrder, ProcessNoiseBase, StepCache, StepModel, TransitionMatrix};

/// Innovation variances below this raise a conditioning error.
pub const MIN_INNOVATION_VARIANCE: f64 = 1e-300;

/// Strictly increasing abscissas, each with zero or more scalar measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    abscissas: Vec<f64>,
    measurements: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(abscissas: Vec<f64>, measurements: Vec<Vec<f64>>) -> Result<Self> {
        if abscissas.is_empty() {
            return Err(Error::invalid("time series has no abscissas"));
        }
        if abscissas.len() != measurements.len() {
            return Err(Error::invalid(format!(
                "{} abscissas but {} measurement groups",
                abscissas.len(),
                measurements.len()
            )));
        }
        if let Some(t) = abscissas.iter().find(|t| !t.is_finite()) {
            return Err(Error::invalid(format!("non-finite abscissa {t}")));
        }
        if let Some(w) = abscissas.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "abscissas must be strictly increasing (index {})",
                w + 1
            )));
        }
        if measurements.iter().flatten().any(|y| !y.is_finite()) {
            return Err(Error::invalid("measurements must be finite"));
        }
        Ok(TimeSeries {
            abscissas,
            measurements,
        })
    }

    /// One measurement per abscissa.
    pub fn from_samples(t: &[f64], y: &[f64]) -> Result<Self> {
        if t.len() != y.len() {
            return Err(Error::invalid("t and y differ in length"));
        }
        Self::new(t.to_vec(), y.iter().map(|&v| vec![v]).collect())
    }

    pub fn abscissas(&self) -> &[f64] {
        &self.abscissas
    }

    pub fn measurements(&self) -> &[Vec<f64>] {
        &self.measurements
    }

    /// Number of abscissas `T`.
    pub fn len(&self) -> usize {
        self.abscissas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abscissas.is_empty()
    }

    /// Total number of scalar measurements `N`.
    pub fn total_measurements(&self) -> usize {
        self.measurements.iter().map(Vec::len).sum()
    }

    pub fn all_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.measurements.iter().flatten().copied()
    }

    /// Population variance of all measurement values.
    pub fn value_variance(&self) -> f64 {
        let n = self.total_measurements() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mean = self.all_values().sum::<f64>() / n;
        self.all_values().map(|y| (y - mean).powi(2)).sum::<f64>() / n
    }

    /// Copy with an empty abscissa inserted at `t`, which must lie strictly
    /// between existing abscissas or outside the current range.
    pub fn with_empty_abscissa(&self, t: f64) -> Result<Self> {
        let pos = self.abscissas.partition_point(|&s| s < t);
        if self.abscissas.get(pos) == Some(&t) {
            return Err(Error::invalid(format!("abscissa {t} already present")));
        }
        let mut ab = self.abscissas.clone();
        let mut ms = self.measurements.clone();
        ab.insert(pos, t);
        ms.insert(pos, Vec::new());
        Self::new(ab, ms)
    }

    /// Multiply every measurement by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.abscissas.clone(),
            self.measurements
                .iter()
                .map(|m| m.iter().map(|y| y * c).collect())
                .collect(),
        )
    }
}

/// Gaussian state as mean plus lower-triangular covariance factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SqrtGaussian {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
}

impl SqrtGaussian {
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov_factor.shape() != (d, d) {
            return Err(Error::invalid(format!(
                "covariance factor is {:?}, expected {d}x{d}",
                cov_factor.shape()
            )));
        }
        if !linalg::is_lower_triangular(&cov_factor) {
            return Err(Error::invalid("covariance factor must be lower triangular"));
        }
        Ok(SqrtGaussian { mean, cov_factor })
    }

    /// Build from a dense covariance by Cholesky factorisation.
    pub fn from_covariance(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let l = linalg::cholesky_psd(cov, 1e-12)
            .ok_or_else(|| Error::conditioning("covariance is not positive semidefinite"))?;
        Self::new(mean, l)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        linalg::square(&self.cov_factor)
    }
}

/// θ = [q, R, m₁|₀, P₁|₀].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Driving-noise intensity.
    pub q: f64,
    /// Measurement variance.
    pub r: f64,
    pub m0: DVector<f64>,
    /// Lower Cholesky factor of `P₁|₀`.
    pub p0_factor: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(q: f64, r: f64, m0: DVector<f64>, p0_factor: DMatrix<f64>) -> Result<Self> {
        let p = ModelParams {
            q,
            r,
            m0,
            p0_factor,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q.is_finite() && self.q > 0.0) {
            return Err(Error::invalid(format!("q must be positive, got {}", self.q)));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::invalid(format!("R must be positive, got {}", self.r)));
        }
        let d = self.m0.len();
        if self.p0_factor.shape() != (d, d) {
            return Err(Error::invalid("P0 factor dimension does not match m0"));
        }
        if !linalg::is_lower_triangular(&self.p0_factor) {
            return Err(Error::invalid("P0 factor must be lower triangular"));
        }
        if self.m0.iter().chain(self.p0_factor.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("initial state must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }

    pub fn p0(&self) -> DMatrix<f64> {
        linalg::square(&self.p0_factor)
    }

    pub fn prior(&self) -> SqrtGaussian {
        SqrtGaussian {
            mean: self.m0.clone(),
            cov_factor: self.p0_factor.clone(),
        }
    }
}

/// Innovation `v` and its variance `S` for one scalar measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Innovation {
    pub v: f64,
    pub s: f64,
}

/// Everything the backward pass, dense output and EM need from the filter.
///
/// All per-abscissa vectors are 0-based; `predicted[k]` and `steps[k]` refer
/// to the transition from abscissa `k` to `k + 1` and have length `T − 1`.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub order: ModelOrder,
    pub params: ModelParams,
    pub abscissas: Vec<f64>,
    pub filtered: Vec<SqrtGaussian>,
    pub predicted: Vec<SqrtGaussian>,
    pub steps: Vec<Arc<StepModel>>,
    pub innovations: Vec<Vec<Innovation>>,
    pub nll: f64,
}

impl ForwardRecord {
    pub fn len(&self) -> usize {
        self.filtered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }

    pub fn transition(&self, k: usize) -> &TransitionMatrix {
        &self.steps[k].transition
    }

    pub fn noise_base(&self, k: usize) -> &ProcessNoiseBase {
        &self.steps[k].noise
    }
}

/// Condition on one scalar measurement of the first state component.
///
/// Returns the updated state, the innovation `v = y − H m` and its variance `S`.
pub fn measurement_update(
    state: &SqrtGaussian,
    y: f64,
    r: f64,
) -> Result<(SqrtGaussian, Innovation)> {
    if !y.is_finite() {
        return Err(Error::invalid(format!("measurement must be finite, got {y}")));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::invalid(format!(
            "measurement variance must be positive, got {r}"
        )));
    }
    let d = state.dim();
    let p_half = &state.cov_factor;
    // Pre-array [[√R, H P^½], [0, P^½]]; H P^½ is the first row of the factor.
    let mut pre = DMatrix::zeros(d + 1, d + 1);
    pre[(0, 0)] = r.sqrt();
    pre.view_mut((0, 1), (1, d)).copy_from(&p_half.row(0));
    pre.view_mut((1, 1), (d, d)).copy_from(p_half);
    let post = linalg::lower_factor(&pre);

    let s_half = post[(0, 0)];
    let s = s_half * s_half;
    if !(s >= MIN_INNOVATION_VARIANCE) {
        return Err(Error::conditioning(format!(
            "innovation variance collapsed to {s:e}"
        )));
    }
    let gain = post.view((1, 0), (d, 1)) / s_half;
    let v = y - state.mean[0];
    let mean = &state.mean + gain.column(0) * v;
    let cov_factor = post.view((1, 1), (d, d)).into_owned();
    Ok((SqrtGaussian { mean, cov_factor }, Innovation { v, s }))
}

/// Predict one step ahead: mean `A m`, factor from the triangularised
/// pre-array `[A P^½, √q Q̄^½]`.
pub fn dynamic_update(
    state: &SqrtGaussian,
    a: &TransitionMatrix,
    q: f64,
    qbar: &ProcessNoiseBase,
) -> Result<SqrtGaussian> {
    let d = state.dim();
    if a.matrix().nrows() != d || qbar.matrix().nrows() != d {
        return Err(Error::invalid(format!(
            "dimension mismatch: state {d}, transition {}, noise {}",
            a.matrix().nrows(),
            qbar.matrix().nrows()
        )));
    }
    if !(q.is_finite() && q > 0.0) {
        return Err(Error::invalid(format!("q must be positive, got {q}")));
    }
    let mut pre = DMatrix::zeros(d, 2 * d);
    pre.view_mut((0, 0), (d, d))
        .copy_from(&(a.matrix() * &state.cov_factor));
    pre.view_mut((0, d), (d, d))
        .copy_from(&(qbar.factor() * q.sqrt()));
    Ok(SqrtGaussian {
        mean: a.matrix() * &state.mean,
        cov_factor: linalg::lower_factor(&pre),
    })
}

/// Kalman filter over the whole series.
pub fn forward_pass(ts: &TimeSeries, params: &ModelParams, order: ModelOrder) -> Result<ForwardRecord> {
    params.validate()?;
    let d = order.get();
    if params.dim() != d {
        return Err(Error::invalid(format!(
            "parameters have dimension {}, model order is {d}",
            params.dim()
        )));
    }
    if ts.total_measurements() == 0 {
        return Err(Error::invalid("time series has no measurements"));
    }
    let t_len = ts.len();
    let mut cache = StepCache::new(order);
    let mut filtered = Vec::with_capacity(t_len);
    let mut predicted = Vec::with_capacity(t_len.saturating_sub(1));
    let mut steps = Vec::with_capacity(t_len.saturating_sub(1));
    let mut innovations = Vec::with_capacity(t_len);
    let mut nll = 0.0;
    let log_2pi = (2.0 * PI).ln();

    let mut state = params.prior();
    for (k, ys) in ts.measurements().iter().enumerate() {
        let mut inn = Vec::with_capacity(ys.len());
        for (j, &y) in ys.iter().enumerate() {
            let (next, i) = measurement_update(&state, y, params.r)
                .map_err(|e| e.at_measurement(j).at_abscissa(k))?;
            nll += 0.5 * (log_2pi + i.s.ln() + i.v * i.v / i.s);
            inn.push(i);
            state = next;
        }
        innovations.push(inn);
        filtered.push(state.clone());
        if k + 1 < t_len {
            let step = cache.get(ts.abscissas()[k + 1] - ts.abscissas()[k])?;
            state = dynamic_update(&state, &step.transition, params.q, &step.noise)
                .map_err(|e| e.at_abscissa(k))?;
            predicted.push(state.clone());
            steps.push(step);
        }
    }

    Ok(ForwardRecord {
        order,
        params: params.clone(),
        abscissas: ts.abscissas().to_vec(),
        filtered,
        predicted,
        steps,
        innovations,
        nll,
    })
}

/// Negative log-likelihood φ(θ) only.
pub fn negative_log_likelihood(ts: &TimeSeries, params: &ModelParams, order: ModelOrder) -> Result<f64> {
    forward_pass(ts, params, order).map(|fr| fr.nll)
}
