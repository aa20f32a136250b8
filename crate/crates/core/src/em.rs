//! Maximum-likelihood estimation of θ = [q, R, m₁|₀, P₁|₀] by
//! expectation–maximisation.
//!
//! Each iteration runs the smoother at the current θ (E-step) and replaces θ
//! by the closed-form maximiser of the expected complete-data
//! log-likelihood (M-step):
//!
//! ```text
//! q       = Σ_k tr(Q̂_k Q̄_k⁻¹) / ((T−1) d)
//! R       = Σ_kj R̂_kj / N
//! m₁|₀    = m̂_{1|T}
//! P₁|₀    = P̂_{1|T}
//! ```
//!
//! Initial values come from a straight-line fit to the first few abscissas
//! and a one-dimensional search of the likelihood over q.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kalman::{forward_pass, negative_log_likelihood, ForwardRecord, ModelParams, TimeSeries};
use crate::linalg;
use crate::model::ModelOrder;
use crate::smoother::{backward_pass, SmoothResult};

/// Number of leading abscissas used by the initial line fit.
pub const INIT_FIT_WINDOW: usize = 10;
/// `P₁|₀ = INIT_P0_SCALE · s² · I` at initialisation.
pub const INIT_P0_SCALE: f64 = 1e-6;
/// Points in the coarse log-q scan.
pub const Q_SCAN_POINTS: usize = 17;
/// Golden-section stopping width on ln q.
pub const Q_SEARCH_REL_WIDTH: f64 = 1e-3;
/// Relative diagonal jitter when refactoring a semidefinite `P̂_{1|T}`.
pub const P0_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop when ‖Δ displacement‖₂ / ‖displacement‖₂ falls below this.
    pub rel_tol: f64,
    /// R is floored at this multiple of the data variance.
    pub r_floor_scale: f64,
    /// Decades below/above the data-scaled centre scanned for the initial q.
    pub q_search_decades: (f64, f64),
    /// Hold R at this value instead of estimating it.
    pub fixed_r: Option<f64>,
    pub execution: Execution,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 50,
            rel_tol: 1e-3,
            r_floor_scale: 1e-12,
            q_search_decades: (-8.0, 8.0),
            fixed_r: None,
            execution: Execution::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(Error::invalid(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if !(self.r_floor_scale.is_finite() && self.r_floor_scale > 0.0) {
            return Err(Error::invalid("r_floor_scale must be positive"));
        }
        let (lo, hi) = self.q_search_decades;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("bad q search range [{lo}, {hi}]")));
        }
        if let Some(r) = self.fixed_r {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::invalid(format!("fixed R must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: ModelParams,
    /// Filter output at the final parameters, kept for dense output.
    pub forward: ForwardRecord,
    pub smoothed: SmoothResult,
    /// φ(θ_i) for θ₀ (initial) through the final θ.
    pub nll_trace: Vec<f64>,
    /// EM updates performed.
    pub iterations: usize,
    pub converged: bool,
    /// The initial q search ended on an edge of its scan range.
    pub q_init_at_boundary: bool,
}

/// Knobs of the M-step that are not part of θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOptions {
    pub r_floor: f64,
    pub fixed_r: Option<f64>,
}

impl UpdateOptions {
    pub fn for_series(ts: &TimeSeries, cfg: &EmConfig) -> Self {
        UpdateOptions {
            r_floor: cfg.r_floor_scale * data_scale(ts),
            fixed_r: cfg.fixed_r,
        }
    }
}

/// Variance of all measurements, falling back to their mean square (then 1)
/// when the data are constant so derived scales stay positive.
pub fn data_scale(ts: &TimeSeries) -> f64 {
    let var = ts.value_variance();
    if var > 0.0 {
        return var;
    }
    let n = ts.total_measurements().max(1) as f64;
    let ms = ts.all_values().map(|y| y * y).sum::<f64>() / n;
    if ms > 0.0 {
        ms
    } else {
        1.0
    }
}

/// Second moment of the one-step process noise under the smoothing
/// distribution, for the transition from `k` to `k + 1` (0-based):
///
/// `Q̂ = e eᵀ + P̂_{k+1} − A G P̂_{k+1} − P̂_{k+1} Gᵀ Aᵀ + A P̂_k Aᵀ`,
/// `e = m̂_{k+1} − A m̂_k`.
pub fn qhat(k: usize, sr: &SmoothResult, fr: &ForwardRecord) -> Result<DMatrix<f64>> {
    if k + 1 >= sr.len() || k >= fr.steps.len() {
        return Err(Error::invalid(format!("transition index {k} out of range")));
    }
    let a = fr.transition(k).matrix();
    let e = &sr.means[k + 1] - a * &sr.means[k];
    let p_next = sr.covariance(k + 1);
    let cross = a * &sr.gains[k] * &p_next;
    let x = &e * e.transpose() + &p_next - &cross - cross.transpose()
        + a * sr.covariance(k) * a.transpose();
    Ok(linalg::symmetrize(&x))
}

/// `R̂ = (y − m̂_{k|T}[0])² + P̂_{k|T}[0,0]`.
pub fn rhat(k: usize, y: f64, sr: &SmoothResult) -> f64 {
    let resid = y - sr.means[k][0];
    let p00 = sr.factors[k].row(0).norm_squared();
    resid * resid + p00
}

/// `tr(Q̂ Q̄⁻¹)` via two triangular solves against the factor of Q̄.
fn noise_trace(qhat: &DMatrix<f64>, qbar_factor: &DMatrix<f64>) -> Result<f64> {
    let x = linalg::solve_lower(qbar_factor, qhat)?;
    let y = linalg::solve_lower(qbar_factor, &x.transpose())?;
    Ok(y.trace())
}

/// M-step given smoother output at the current parameters (`fr.params`).
pub fn em_update(
    ts: &TimeSeries,
    fr: &ForwardRecord,
    sr: &SmoothResult,
    opts: UpdateOptions,
) -> Result<ModelParams> {
    let t_len = ts.len();
    let d = fr.order.get();
    let old = &fr.params;

    let q = if t_len >= 2 {
        let mut acc = 0.0;
        for k in 0..t_len - 1 {
            let qh = qhat(k, sr, fr)?;
            acc += noise_trace(&qh, fr.noise_base(k).factor()).map_err(|e| e.at_abscissa(k))?;
        }
        let q = acc / ((t_len - 1) * d) as f64;
        if !(q.is_finite() && q > 0.0) {
            return Err(Error::Internal(format!(
                "EM update produced non-positive driving-noise intensity {q:e}"
            )));
        }
        q
    } else {
        old.q
    };

    let r = match opts.fixed_r {
        Some(r) => r,
        None => {
            let n = ts.total_measurements();
            let sum: f64 = ts
                .measurements()
                .iter()
                .enumerate()
                .flat_map(|(k, ys)| ys.iter().map(move |&y| rhat(k, y, sr)))
                .sum();
            (sum / n as f64).max(opts.r_floor)
        }
    };

    let p0 = sr.covariance(0);
    let p0_factor = linalg::cholesky_psd(&p0, P0_JITTER)
        .ok_or_else(|| Error::conditioning("smoothed initial covariance could not be factored"))?;
    ModelParams::new(q, r, sr.means[0].clone(), p0_factor)
}

/// One EM iteration with default options.
pub fn em_step(ts: &TimeSeries, params: &ModelParams, order: ModelOrder) -> Result<ModelParams> {
    em_step_with(ts, params, order, UpdateOptions::for_series(ts, &EmConfig::default()))
}

pub fn em_step_with(
    ts: &TimeSeries,
    params: &ModelParams,
    order: ModelOrder,
    opts: UpdateOptions,
) -> Result<ModelParams> {
    if ts.len() < 2 {
        return Err(Error::invalid("EM step needs at least two abscissas"));
    }
    let fr = forward_pass(ts, params, order)?;
    let sr = backward_pass(&fr)?;
    em_update(ts, &fr, &sr, opts)
}

/// Expected complete-data log-likelihood 𝒬(θ, θ̂), smoothing at θ̂.
pub fn em_objective(
    theta: &ModelParams,
    theta_hat: &ModelParams,
    ts: &TimeSeries,
    order: ModelOrder,
) -> Result<f64> {
    let fr = forward_pass(ts, theta_hat, order)?;
    let sr = backward_pass(&fr)?;
    em_objective_from(theta, ts, &fr, &sr)
}

/// 𝒬(θ, θ̂) from smoother output already computed at θ̂.
pub fn em_objective_from(
    theta: &ModelParams,
    ts: &TimeSeries,
    fr: &ForwardRecord,
    sr: &SmoothResult,
) -> Result<f64> {
    theta.validate()?;
    let d = fr.order.get();
    if theta.dim() != d {
        return Err(Error::invalid("parameter dimension does not match model order"));
    }
    let log_2pi = (2.0 * PI).ln();
    let l0 = &theta.p0_factor;

    // initial state
    let diff = &sr.means[0] - &theta.m0;
    let w = linalg::solve_lower(l0, &DMatrix::from_column_slice(d, 1, diff.as_slice()))
        .map_err(|_| Error::conditioning("initial covariance P0 is singular"))?;
    let spread = linalg::solve_lower(l0, &sr.factors[0])?;
    let log_det_p0: f64 = l0.diagonal().iter().map(|x| 2.0 * x.ln()).sum();
    let mut total = -0.5 * (d as f64 * log_2pi + log_det_p0)
        - 0.5 * spread.norm_squared()
        - 0.5 * w.norm_squared();

    // dynamics
    for k in 0..ts.len().saturating_sub(1) {
        let c = fr.noise_base(k).factor();
        let log_det: f64 =
            d as f64 * (log_2pi + theta.q.ln()) + c.diagonal().iter().map(|x| 2.0 * x.ln()).sum::<f64>();
        let tr = noise_trace(&qhat(k, sr, fr)?, c)? / theta.q;
        total -= 0.5 * (log_det + tr);
    }

    // measurements
    for (k, ys) in ts.measurements().iter().enumerate() {
        for &y in ys {
            total -= 0.5 * (log_2pi + theta.r.ln() + rhat(k, y, sr) / theta.r);
        }
    }
    Ok(total)
}

/// Least-squares line `a + b (t − t₁)` and its residual variance (divided by n).
fn line_fit(points: &[(f64, f64)], t0: f64) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let tm = points.iter().map(|p| p.0 - t0).sum::<f64>() / n;
    let ym = points.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = points.iter().map(|p| (p.0 - t0 - tm).powi(2)).sum();
    let sty: f64 = points.iter().map(|p| (p.0 - t0 - tm) * (p.1 - ym)).sum();
    let distinct = points.windows(2).any(|w| w[0].0 != w[1].0);
    let b = if distinct && stt > 0.0 { sty / stt } else { 0.0 };
    let a = ym - b * tm;
    let rss: f64 = points
        .iter()
        .map(|p| (p.1 - a - b * (p.0 - t0)).powi(2))
        .sum();
    (a, b, rss / n)
}

/// Result of the initial one-dimensional search over q.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QSearch {
    pub q: f64,
    pub nll: f64,
    pub at_boundary: bool,
}

/// Data-scaled centre of the q scan: `s² / (t_T − t₁)^(2d−1)`.
fn q_centre(ts: &TimeSeries, order: ModelOrder) -> f64 {
    let ab = ts.abscissas();
    let span = ab[ab.len() - 1] - ab[0];
    let span = if span > 0.0 { span } else { 1.0 };
    data_scale(ts) / span.powi(2 * order.get() as i32 - 1)
}

/// Minimise φ over q with the other parameters of `partial` held fixed.
///
/// A 17-point scan over `log₁₀ q ∈ centre + decades` brackets the minimum,
/// then golden-section search narrows it to a relative width of 1e-3.
pub fn minimize_q(
    ts: &TimeSeries,
    partial: &ModelParams,
    order: ModelOrder,
    decades: (f64, f64),
    exec: Execution,
) -> Result<QSearch> {
    let centre = q_centre(ts, order);
    let q_of = |u: f64| centre * 10f64.powf(u);
    let cost = |u: f64| -> f64 {
        let mut p = partial.clone();
        p.q = q_of(u);
        match negative_log_likelihood(ts, &p, order) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };

    let (lo, hi) = decades;
    let step = (hi - lo) / (Q_SCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..Q_SCAN_POINTS).map(|i| lo + step * i as f64).collect();
    let values = exec.map(&grid, |&u| cost(u));
    let (best, best_val) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    if !best_val.is_finite() {
        return Err(Error::Fitting(
            "likelihood is not finite anywhere on the q scan".into(),
        ));
    }
    if best == 0 || best == Q_SCAN_POINTS - 1 {
        return Ok(QSearch {
            q: q_of(grid[best]),
            nll: best_val,
            at_boundary: true,
        });
    }

    let tol_u = Q_SEARCH_REL_WIDTH / std::f64::consts::LN_10;
    let (u, v) = golden_section(cost, grid[best - 1], grid[best + 1], tol_u);
    let (u, v) = if v <= best_val { (u, v) } else { (grid[best], best_val) };
    Ok(QSearch {
        q: q_of(u),
        nll: v,
        at_boundary: false,
    })
}

/// Golden-section minimisation of a unimodal `f` on `[a, b]` down to width `tol`.
fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Starting parameters: line fit for m₁|₀ and R, tiny isotropic P₁|₀, then q
/// by likelihood search.
pub fn init_params(ts: &TimeSeries, order: ModelOrder) -> Result<ModelParams> {
    init_params_with(ts, order, &EmConfig::default()).map(|(p, _)| p)
}

/// As [`init_params`], also reporting whether the q search hit its boundary.
pub fn init_params_with(ts: &TimeSeries, order: ModelOrder, cfg: &EmConfig) -> Result<(ModelParams, bool)> {
    cfg.validate()?;
    if ts.total_measurements() < 2 {
        return Err(Error::invalid("fitting needs at least two measurements"));
    }
    let d = order.get();
    let t0 = ts.abscissas()[0];
    let points: Vec<(f64, f64)> = ts
        .abscissas()
        .iter()
        .zip(ts.measurements())
        .filter(|(_, ys)| !ys.is_empty())
        .take(INIT_FIT_WINDOW)
        .flat_map(|(&t, ys)| ys.iter().map(move |&y| (t, y)))
        .collect();
    let (a, b, resid_var) = line_fit(&points, t0);

    let scale = data_scale(ts);
    let floor = cfg.r_floor_scale * scale;
    let r = cfg.fixed_r.unwrap_or(resid_var.max(floor));
    let mut m0 = DVector::zeros(d);
    m0[0] = a;
    if d > 1 {
        m0[1] = b;
    }
    let p0_factor = DMatrix::identity(d, d) * (INIT_P0_SCALE * scale).sqrt();
    let mut params = ModelParams::new(1.0, r, m0, p0_factor)?;
    let search = minimize_q(ts, &params, order, cfg.q_search_decades, cfg.execution)?;
    params.q = search.q;
    Ok((params, search.at_boundary))
}

fn relative_change(prev: &[f64], next: &[f64]) -> f64 {
    let diff: f64 = prev.iter().zip(next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

/// Initialise, iterate EM until the smoothed displacement settles, and
/// smooth once more at the final parameters.
pub fn fit(ts: &TimeSeries, order: ModelOrder, cfg: &EmConfig) -> Result<FitReport> {
    let (mut params, q_init_at_boundary) = init_params_with(ts, order, cfg)?;
    let opts = UpdateOptions::for_series(ts, cfg);
    let mut nll_trace = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    let mut iterations = 0;

    loop {
        let fr = forward_pass(ts, &params, order)?;
        let sr = backward_pass(&fr)?;
        nll_trace.push(sr.nll);
        let disp = sr.displacement();
        let converged = prev
            .as_ref()
            .is_some_and(|p| relative_change(p, &disp) < cfg.rel_tol);
        if converged || iterations >= cfg.max_iters || ts.len() < 2 {
            return Ok(FitReport {
                params,
                forward: fr,
                smoothed: sr,
                nll_trace,
                iterations,
                converged,
                q_init_at_boundary,
            });
        }
        params = em_update(ts, &fr, &sr, opts)?;
        iterations += 1;
        prev = Some(disp);
    }
}

/// Independent fits of many series, spread over threads when allowed.
pub fn fit_batch(series: &[TimeSeries], order: ModelOrder, cfg: &EmConfig) -> Vec<Result<FitReport>> {
    let inner = EmConfig {
        execution: Execution::Sequential,
        ..cfg.clone()
    };
    cfg.execution.map(series, |ts| fit(ts, order, &inner))
}
