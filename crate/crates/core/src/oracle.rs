//! Brute-force reference computations for verification.
//!
//! The whole state trajectory is treated as one stacked Gaussian vector and
//! conditioned on all measurements with textbook dense linear algebra. This
//! is O((T·d)³) and numerically naive; it exists so the recursive filter and
//! smoother can be checked against an independent route. Sizes above
//! [`MAX_STACKED_DIM`] are refused.
//!
//! The covariance-form formulas cancel many digits when the prior variance
//! dwarfs the measurement noise, so all arithmetic runs in
//! [`ORACLE_PRECISION_BITS`]-bit binary floating point and only the results
//! are rounded to `f64`. Step lengths are taken as the `f64` differences of
//! the abscissas, exactly as the recursive code sees them.

use std::f64::consts::PI;

use dashu_float::round::mode::HalfEven;
use dashu_float::FBig;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::{ModelParams, TimeSeries};
use crate::model::ModelOrder;

pub const MAX_STACKED_DIM: usize = 400;
pub const ORACLE_PRECISION_BITS: usize = 256;

type Hp = FBig<HalfEven, 2>;

fn hp(x: f64) -> Hp {
    Hp::try_from(x)
        .expect("oracle inputs are finite")
        .with_precision(ORACLE_PRECISION_BITS)
        .value()
}

fn hp_int(n: u64) -> Hp {
    hp(n as f64)
}

fn to_f64(x: &Hp) -> f64 {
    x.to_f64().value()
}

/// Row-major dense matrix in extended precision.
#[derive(Debug, Clone, PartialEq)]
struct HpMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Hp>,
}

impl HpMatrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        HpMatrix {
            rows,
            cols,
            data: vec![hp(0.0); rows * cols],
        }
    }

    fn at(&self, i: usize, j: usize) -> &Hp {
        &self.data[i * self.cols + j]
    }

    fn set(&mut self, i: usize, j: usize, v: Hp) {
        self.data[i * self.cols + j] = v;
    }

    fn to_symmetric_f64(&self) -> DMatrix<f64> {
        let half = hp(0.5);
        DMatrix::from_fn(self.rows, self.cols, |i, j| {
            to_f64(&((self.at(i, j) + self.at(j, i)) * &half))
        })
    }
}

fn dot(a: &[Hp], b: &[Hp]) -> Hp {
    a.iter().zip(b).fold(hp(0.0), |acc, (x, y)| acc + x * y)
}

fn factorial(n: usize) -> Hp {
    (1..=n as u64).fold(hp(1.0), |acc, k| acc * hp_int(k))
}

fn powers(x: &Hp, n: usize) -> Vec<Hp> {
    let mut out = vec![hp(1.0)];
    for _ in 1..=n {
        let next = out.last().expect("nonempty") * x;
        out.push(next);
    }
    out
}

/// `A(Δ)` and `Q̄(Δ)` straight from their closed forms.
fn step_matrices(d: usize, dt: f64) -> (HpMatrix, HpMatrix) {
    let pw = powers(&hp(dt), 2 * d);
    let mut a = HpMatrix::zeros(d, d);
    let mut qbar = HpMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            a.set(i, j, &pw[j - i] / factorial(j - i));
        }
        for j in 0..d {
            let p = 2 * d - 1 - i - j;
            let den = hp_int(p as u64) * factorial(d - 1 - i) * factorial(d - 1 - j);
            qbar.set(i, j, &pw[p] / den);
        }
    }
    (a, qbar)
}

/// `LDLᵀ` of a symmetric positive definite matrix; `None` on a nonpositive pivot.
struct Ldl {
    l: HpMatrix,
    d: Vec<Hp>,
}

impl Ldl {
    fn new(s: &HpMatrix) -> Option<Self> {
        let n = s.rows;
        let zero = hp(0.0);
        let mut l = HpMatrix::zeros(n, n);
        let mut d = Vec::with_capacity(n);
        for j in 0..n {
            let mut dj = s.at(j, j).clone();
            for k in 0..j {
                dj -= l.at(j, k) * l.at(j, k) * &d[k];
            }
            if dj <= zero {
                return None;
            }
            l.set(j, j, hp(1.0));
            for i in j + 1..n {
                let mut v = s.at(i, j).clone();
                for k in 0..j {
                    v -= l.at(i, k) * l.at(j, k) * &d[k];
                }
                l.set(i, j, v / &dj);
            }
            d.push(dj);
        }
        Some(Ldl { l, d })
    }

    /// `w` with `L w = b`.
    fn forward(&self, b: &[Hp]) -> Vec<Hp> {
        let mut w: Vec<Hp> = Vec::with_capacity(b.len());
        for i in 0..b.len() {
            let mut v = b[i].clone();
            for (k, wk) in w.iter().enumerate() {
                v -= self.l.at(i, k) * wk;
            }
            w.push(v);
        }
        w
    }

    /// `x` with `L D Lᵀ x = b`.
    fn solve(&self, b: &[Hp]) -> Vec<Hp> {
        let mut x: Vec<Hp> = self
            .forward(b)
            .into_iter()
            .zip(&self.d)
            .map(|(w, d)| w / d)
            .collect();
        for i in (0..x.len()).rev() {
            let mut v = x[i].clone();
            for k in i + 1..x.len() {
                v -= self.l.at(k, i) * &x[k];
            }
            x[i] = v;
        }
        x
    }
}

/// Gaussian over the stacked states `[x_1; …; x_T]`.
///
/// `mean` and `cov` are the `f64` roundings of an extended-precision
/// representation that later conditioning steps keep working with.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    exact_mean: Vec<Hp>,
    exact_cov: HpMatrix,
}

impl JointGaussian {
    fn from_exact(exact_mean: Vec<Hp>, exact_cov: HpMatrix) -> Self {
        JointGaussian {
            mean: DVector::from_iterator(exact_mean.len(), exact_mean.iter().map(to_f64)),
            cov: exact_cov.to_symmetric_f64(),
            exact_mean,
            exact_cov,
        }
    }

    pub fn block_mean(&self, k: usize, d: usize) -> DVector<f64> {
        self.mean.rows(k * d, d).into_owned()
    }

    pub fn block_cov(&self, k: usize, d: usize) -> DMatrix<f64> {
        self.cov.view((k * d, k * d), (d, d)).into_owned()
    }

    /// Cross-covariance block `Cov(x_i, x_j)`.
    pub fn cross_cov(&self, i: usize, j: usize, d: usize) -> DMatrix<f64> {
        self.cov.view((i * d, j * d), (d, d)).into_owned()
    }
}

/// Prior over the stacked trajectory implied by the dynamics and `x_1 ~ N(m₁|₀, P₁|₀)`.
pub fn build_joint_prior(ts: &TimeSeries, params: &ModelParams, order: ModelOrder) -> Result<JointGaussian> {
    let d = order.get();
    let t_len = ts.len();
    let n = t_len * d;
    if n > MAX_STACKED_DIM {
        return Err(Error::invalid(format!(
            "oracle limited to {MAX_STACKED_DIM} stacked states, got {n}"
        )));
    }
    if params.dim() != d {
        return Err(Error::invalid("parameter dimension does not match model order"));
    }
    let q = hp(params.q);
    let mut mean: Vec<Hp> = params.m0.iter().map(|&x| hp(x)).collect();
    mean.resize(n, hp(0.0));
    let mut cov = HpMatrix::zeros(n, n);
    let l0 = &params.p0_factor;
    for i in 0..d {
        for j in 0..d {
            let v = (0..d).fold(hp(0.0), |acc, k| acc + hp(l0[(i, k)]) * hp(l0[(j, k)]));
            cov.set(i, j, v);
        }
    }

    for k in 0..t_len - 1 {
        let dt = ts.abscissas()[k + 1] - ts.abscissas()[k];
        let (a, qbar) = step_matrices(d, dt);
        let (cur, next) = (k * d, (k + 1) * d);
        for i in 0..d {
            let v = dot(&a.data[i * d..(i + 1) * d], &mean[cur..cur + d]);
            mean[next + i] = v;
        }
        // C_{j,k+1} = C_{j,k} Aᵀ for j ≤ k
        for row in 0..next {
            for i in 0..d {
                let v = (0..d).fold(hp(0.0), |acc, c| acc + cov.at(row, cur + c) * a.at(i, c));
                cov.set(row, next + i, v.clone());
                cov.set(next + i, row, v);
            }
        }
        // C_{k+1,k+1} = A C_{k,k} Aᵀ + q Q̄
        for i in 0..d {
            for j in 0..d {
                let v = (0..d).fold(q.clone() * qbar.at(i, j), |acc, c| {
                    acc + a.at(i, c) * cov.at(cur + c, next + j)
                });
                cov.set(next + i, next + j, v);
            }
        }
    }
    Ok(JointGaussian::from_exact(mean, cov))
}

/// Flattened measurement list as (abscissa index, value).
fn stacked_measurements(ts: &TimeSeries) -> Vec<(usize, f64)> {
    ts.measurements()
        .iter()
        .enumerate()
        .flat_map(|(k, ys)| ys.iter().map(move |&y| (k, y)))
        .collect()
}

fn check_shape(jg: &JointGaussian, ts: &TimeSeries) -> Result<usize> {
    let n = jg.exact_mean.len();
    if ts.is_empty() || !n.is_multiple_of(ts.len()) {
        return Err(Error::invalid("joint Gaussian does not match the time series"));
    }
    Ok(n / ts.len())
}

/// Marginal covariance `M C Mᵀ + r I` of the stacked measurements.
fn measurement_covariance(jg: &JointGaussian, rows: &[usize], r: f64) -> HpMatrix {
    let r = hp(r);
    let mut s = HpMatrix::zeros(rows.len(), rows.len());
    for (a, &ia) in rows.iter().enumerate() {
        for (b, &ib) in rows.iter().enumerate() {
            let mut v = jg.exact_cov.at(ia, ib).clone();
            if a == b {
                v += &r;
            }
            s.set(a, b, v);
        }
    }
    s
}

/// Condition the stacked prior on every measurement at once.
pub fn condition_on_measurements(jg: &JointGaussian, ts: &TimeSeries, r: f64) -> Result<JointGaussian> {
    let d = check_shape(jg, ts)?;
    let n = jg.exact_mean.len();
    let obs = stacked_measurements(ts);
    if obs.is_empty() {
        return Err(Error::invalid("no measurements to condition on"));
    }
    let rows: Vec<usize> = obs.iter().map(|&(k, _)| k * d).collect();
    let ldl = Ldl::new(&measurement_covariance(jg, &rows, r))
        .ok_or_else(|| Error::conditioning("innovation covariance is singular"))?;

    let resid: Vec<Hp> = obs
        .iter()
        .zip(&rows)
        .map(|(&(_, y), &i)| hp(y) - &jg.exact_mean[i])
        .collect();
    let z = ldl.solve(&resid);
    // B = M C, one row per measurement
    let b: Vec<&[Hp]> = rows
        .iter()
        .map(|&i| &jg.exact_cov.data[i * n..(i + 1) * n])
        .collect();
    let mut mean = jg.exact_mean.clone();
    for (j, m) in mean.iter_mut().enumerate() {
        *m += (0..obs.len()).fold(hp(0.0), |acc, a| acc + &b[a][j] * &z[a]);
    }
    // C − Bᵀ S⁻¹ B, one column of S⁻¹ B at a time
    let mut cov = jg.exact_cov.clone();
    for j in 0..n {
        let col: Vec<Hp> = b.iter().map(|row| row[j].clone()).collect();
        let x = ldl.solve(&col);
        for i in 0..n {
            let v = (0..obs.len()).fold(hp(0.0), |acc, a| acc + &b[a][i] * &x[a]);
            let cur = cov.at(i, j) - v;
            cov.set(i, j, cur);
        }
    }
    Ok(JointGaussian::from_exact(mean, cov))
}

/// Same posterior, one scalar measurement at a time.
pub fn condition_sequentially(jg: &JointGaussian, ts: &TimeSeries, r: f64) -> Result<JointGaussian> {
    let d = check_shape(jg, ts)?;
    let n = jg.exact_mean.len();
    let r = hp(r);
    let zero = hp(0.0);
    let mut mean = jg.exact_mean.clone();
    let mut cov = jg.exact_cov.clone();
    for (k, y) in stacked_measurements(ts) {
        let idx = k * d;
        let s = cov.at(idx, idx) + &r;
        if s <= zero {
            return Err(Error::conditioning("innovation variance is not positive"));
        }
        let col: Vec<Hp> = (0..n).map(|i| cov.at(i, idx).clone()).collect();
        let w = (hp(y) - &mean[idx]) / &s;
        for i in 0..n {
            mean[i] += &col[i] * &w;
            for j in 0..n {
                let v = cov.at(i, j) - &col[i] * &col[j] / &s;
                cov.set(i, j, v);
            }
        }
    }
    Ok(JointGaussian::from_exact(mean, cov))
}

/// `−log N(y; M μ, M C Mᵀ + r I)` by dense `LDLᵀ` factorization.
pub fn nll_direct(ts: &TimeSeries, params: &ModelParams, order: ModelOrder) -> Result<f64> {
    let jg = build_joint_prior(ts, params, order)?;
    let d = order.get();
    let obs = stacked_measurements(ts);
    let rows: Vec<usize> = obs.iter().map(|&(k, _)| k * d).collect();
    let ldl = Ldl::new(&measurement_covariance(&jg, &rows, params.r))
        .ok_or_else(|| Error::conditioning("marginal measurement covariance is not positive definite"))?;
    let resid: Vec<Hp> = obs
        .iter()
        .zip(&rows)
        .map(|(&(_, y), &i)| hp(y) - &jg.exact_mean[i])
        .collect();
    let w = ldl.forward(&resid);
    let quad = w
        .iter()
        .zip(&ldl.d)
        .fold(hp(0.0), |acc, (wi, di)| acc + wi * wi / di);
    let log_det: f64 = ldl.d.iter().map(|x| to_f64(x).ln()).sum();
    Ok(0.5 * (obs.len() as f64 * (2.0 * PI).ln() + log_det + to_f64(&quad)))
}
