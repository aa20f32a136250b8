//! Square-root Rauch–Tung–Striebel backward pass and dense output.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kalman::{dynamic_update, ForwardRecord};
use crate::linalg;
use crate::model::{ProcessNoiseBase, TransitionMatrix};

/// Smoothed states `x_{k|T}` for every abscissa (0-based).
///
/// `gains[k]` is `G_k`, the gain linking abscissa `k` to `k + 1`; it has
/// length `T − 1`.
#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub means: Vec<DVector<f64>>,
    pub factors: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub nll: f64,
}

impl SmoothResult {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn covariance(&self, k: usize) -> DMatrix<f64> {
        linalg::square(&self.factors[k])
    }

    /// Smoothed signal values (component 0) at every abscissa.
    pub fn displacement(&self) -> Vec<f64> {
        self.means.iter().map(|m| m[0]).collect()
    }
}

/// Posterior of the state at an arbitrary time between two abscissas.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// One square-root RTS step from a state at `t` to the smoothed state at the
/// next abscissa, reached through `a` with process-noise factor `noise`.
///
/// Triangularizing `[[Pᵀᐟ² Aᵀ, Pᵀᐟ²], [Qᵀᐟ², 0]]` gives `R₁₁ᵀR₁₁ = P_pred`,
/// `R₁₁ᵀR₁₂ = A P` and `R₂₂ᵀR₂₂ = P − G P_pred Gᵀ`, so `G = R₁₂ᵀR₁₁⁻ᵀ` and the
/// smoothed factor follows from a second QR of `[R₂₂; P_{next|T}ᵀᐟ² Gᵀ]`.
/// Returns `(G, P_{·|T}^½)`.
fn rts_step(
    factor: &DMatrix<f64>,
    a: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    next_smoothed: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = factor.nrows();
    let p_half_t = factor.transpose();
    let mut pre = DMatrix::zeros(2 * d, 2 * d);
    pre.view_mut((0, 0), (d, d)).copy_from(&(&p_half_t * a.transpose()));
    pre.view_mut((0, d), (d, d)).copy_from(&p_half_t);
    pre.view_mut((d, 0), (d, d)).copy_from(&noise.transpose());
    let r = linalg::qr_upper(&pre);
    let r11_t = r.view((0, 0), (d, d)).transpose();
    let gain_t = linalg::solve_lower_transposed(&r11_t, &r.view((0, d), (d, d)).into_owned())?;

    let mut stack = DMatrix::zeros(2 * d, d);
    stack.view_mut((0, 0), (d, d)).copy_from(&r.view((d, d), (d, d)));
    stack.view_mut((d, 0), (d, d)).copy_from(&(next_smoothed.transpose() * &gain_t));
    Ok((gain_t.transpose(), linalg::qr_upper(&stack).transpose()))
}

/// Backward pass over a completed forward record.
pub fn backward_pass(fr: &ForwardRecord) -> Result<SmoothResult> {
    let t_len = fr.len();
    if t_len == 0 || fr.predicted.len() + 1 != t_len || fr.steps.len() + 1 != t_len {
        return Err(Error::invalid("forward record is incomplete"));
    }
    let d = fr.order.get();
    let q_sqrt = fr.params.q.sqrt();

    let mut means = vec![DVector::zeros(d); t_len];
    let mut factors = vec![DMatrix::zeros(d, d); t_len];
    let mut gains = vec![DMatrix::zeros(d, d); t_len - 1];

    let last = &fr.filtered[t_len - 1];
    means[t_len - 1] = last.mean.clone();
    factors[t_len - 1] = last.cov_factor.clone();

    for k in (0..t_len - 1).rev() {
        let filt = &fr.filtered[k];
        let noise = fr.noise_base(k).factor() * q_sqrt;
        let (gain, factor) = rts_step(&filt.cov_factor, fr.transition(k).matrix(), &noise, &factors[k + 1])
            .map_err(|e| e.at_abscissa(k))?;
        means[k] = &filt.mean + &gain * (&means[k + 1] - &fr.predicted[k].mean);
        factors[k] = factor;
        gains[k] = gain;
    }

    Ok(SmoothResult {
        means,
        factors,
        gains,
        nll: fr.nll,
    })
}

/// Forward pass followed by backward pass.
pub fn smooth(
    ts: &crate::kalman::TimeSeries,
    params: &crate::kalman::ModelParams,
    order: crate::model::ModelOrder,
) -> Result<(ForwardRecord, SmoothResult)> {
    let fr = crate::kalman::forward_pass(ts, params, order)?;
    let sr = backward_pass(&fr)?;
    Ok((fr, sr))
}

/// Quantities shared by every query inside one interval `[t_k, t_{k+1}]`.
struct IntervalContext<'a> {
    fr: &'a ForwardRecord,
    k: usize,
    dt: f64,
    /// `m_{k+1|T} − m_{k+1|k}`
    mean_correction: DVector<f64>,
    next_smoothed: &'a DMatrix<f64>,
}

impl<'a> IntervalContext<'a> {
    fn new(fr: &'a ForwardRecord, sr: &'a SmoothResult, k: usize) -> Result<Self> {
        let t_len = fr.len();
        if t_len < 2 || k + 1 >= t_len {
            return Err(Error::invalid(format!(
                "interval index {k} out of range for {t_len} abscissas"
            )));
        }
        if sr.len() != t_len {
            return Err(Error::invalid("smoother result does not match forward record"));
        }
        Ok(IntervalContext {
            fr,
            k,
            dt: fr.abscissas[k + 1] - fr.abscissas[k],
            mean_correction: &sr.means[k + 1] - &fr.predicted[k].mean,
            next_smoothed: &sr.factors[k + 1],
        })
    }

    /// Predict from `t_k` to `t_k + θΔ`, then run one RTS step back from
    /// `t_{k+1}` with `A_{1−θ}` and `Q̄_{1−θ}`.
    fn predict(&self, theta: f64) -> Result<DenseState> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::invalid(format!(
                "interpolation fraction must lie in (0, 1), got {theta}"
            )));
        }
        let order = self.fr.order;
        let q = self.fr.params.q;
        let a_theta = TransitionMatrix::new(order, theta * self.dt)?;
        let q_theta = ProcessNoiseBase::new(order, theta * self.dt)?;
        let rest = (1.0 - theta) * self.dt;
        let a_rest = TransitionMatrix::new(order, rest)?;
        let q_rest = ProcessNoiseBase::new(order, rest)?;

        let pred = dynamic_update(&self.fr.filtered[self.k], &a_theta, q, &q_theta)?;
        let (gain, factor) = rts_step(
            &pred.cov_factor,
            a_rest.matrix(),
            &(q_rest.factor() * q.sqrt()),
            self.next_smoothed,
        )
        .map_err(|e| e.at_abscissa(self.k))?;
        Ok(DenseState {
            t: self.fr.abscissas[self.k] + theta * self.dt,
            mean: pred.mean + gain * &self.mean_correction,
            cov: linalg::square(&factor),
        })
    }
}

/// Smoothed posterior at `t_k + θ Δ_k`, 0 < θ < 1, for interval `k` (0-based).
pub fn dense_predict(fr: &ForwardRecord, sr: &SmoothResult, k: usize, theta: f64) -> Result<DenseState> {
    IntervalContext::new(fr, sr, k)?.predict(theta)
}

/// Batch of [`dense_predict`] calls in one interval.
pub fn interpolant_samples(
    fr: &ForwardRecord,
    sr: &SmoothResult,
    k: usize,
    thetas: &[f64],
) -> Result<Vec<DenseState>> {
    let ctx = IntervalContext::new(fr, sr, k)?;
    thetas.iter().map(|&th| ctx.predict(th)).collect()
}

/// Smoothed posterior at arbitrary sorted times within `[t_1, t_T]`.
///
/// Times equal to an abscissa return that abscissa's smoothed state; all
/// others go through dense output. Queries are independent and are spread
/// over threads when `exec` allows.
pub fn states_at(
    fr: &ForwardRecord,
    sr: &SmoothResult,
    times: &[f64],
    exec: Execution,
) -> Result<Vec<DenseState>> {
    let ab = &fr.abscissas;
    let (first, last) = (ab[0], ab[ab.len() - 1]);
    if let Some(&t) = times.iter().find(|&&t| !(t >= first && t <= last)) {
        return Err(Error::invalid(format!(
            "query time {t} outside the data range [{first}, {last}]"
        )));
    }
    exec.map(times, |&t| {
        let pos = ab.partition_point(|&s| s < t);
        if ab.get(pos) == Some(&t) {
            return Ok(DenseState {
                t,
                mean: sr.means[pos].clone(),
                cov: sr.covariance(pos),
            });
        }
        let k = pos - 1;
        let theta = (t - ab[k]) / (ab[k + 1] - ab[k]);
        let mut st = dense_predict(fr, sr, k, theta)?;
        st.t = t;
        Ok(st)
    })
    .into_iter()
    .collect()
}
