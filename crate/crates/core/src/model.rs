//! Discrete-time matrices of the (d−1)-fold integrated Wiener process.
//!
//! The continuous model is `dx = F x dt + √q L dw` with `F` the nilpotent
//! shift matrix and `L = e_d`. Because `F` is nilpotent both the transition
//! matrix and the process-noise Gramian have closed forms that are
//! polynomials in the step length, so no matrix exponential is needed.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Largest supported state dimension. The fraction matrix behind `Q̄` is
/// Hilbert-like and its Cholesky factor loses accuracy quickly beyond this.
pub const MAX_ORDER: usize = 8;

/// State dimension `d`: component 0 is the signal, component `j` its j-th derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelOrder(usize);

impl ModelOrder {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 || d > MAX_ORDER {
            return Err(Error::invalid(format!(
                "model order must be in [1, {MAX_ORDER}], got {d}"
            )));
        }
        Ok(ModelOrder(d))
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for ModelOrder {
    type Error = Error;
    fn try_from(d: usize) -> Result<Self> {
        ModelOrder::new(d)
    }
}

fn check_step(dt: f64) -> Result<()> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::invalid(format!(
            "time step must be positive and finite, got {dt}"
        )));
    }
    Ok(())
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// `A = exp(F Δ)`: upper triangular, entry (i, j) = Δ^(j−i)/(j−i)!.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    a: DMatrix<f64>,
    dt: f64,
}

impl TransitionMatrix {
    pub fn new(order: ModelOrder, dt: f64) -> Result<Self> {
        check_step(dt)?;
        let d = order.get();
        let a = DMatrix::from_fn(d, d, |i, j| {
            if j >= i {
                dt.powi((j - i) as i32) / factorial(j - i)
            } else {
                0.0
            }
        });
        Ok(TransitionMatrix { a, dt })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// `Q̄ = ∫₀^Δ exp(F s) L Lᵀ exp(F s)ᵀ ds`, so that `Q = q·Q̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessNoiseBase {
    qbar: DMatrix<f64>,
    qbar_chol: DMatrix<f64>,
    dt: f64,
}

impl ProcessNoiseBase {
    pub fn new(order: ModelOrder, dt: f64) -> Result<Self> {
        check_step(dt)?;
        let d = order.get();
        // 0-based: exponent p = 2d − 1 − i − j, denominator p (d−1−i)! (d−1−j)!
        let qbar = DMatrix::from_fn(d, d, |i, j| {
            let p = 2 * d - 1 - i - j;
            dt.powi(p as i32) / (p as f64 * factorial(d - 1 - i) * factorial(d - 1 - j))
        });
        // chol(D M D) = D chol(M) with D = diag(Δ^(d−1−i+1/2)).
        let chol_m = fraction_factor(order)?;
        let sqrt_dt = dt.sqrt();
        let mut qbar_chol = chol_m.clone();
        for i in 0..d {
            let scale = dt.powi((d - 1 - i) as i32) * sqrt_dt;
            qbar_chol.row_mut(i).scale_mut(scale);
        }
        Ok(ProcessNoiseBase {
            qbar,
            qbar_chol,
            dt,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.qbar
    }

    /// Lower Cholesky factor of `Q̄`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.qbar_chol
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

/// Constant matrix `M` with `Q̄ = D M D`.
fn fraction_matrix(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| {
        let p = 2 * d - 1 - i - j;
        1.0 / (p as f64 * factorial(d - 1 - i) * factorial(d - 1 - j))
    })
}

static FRACTION_FACTORS: [OnceLock<Option<DMatrix<f64>>>; MAX_ORDER] =
    [const { OnceLock::new() }; MAX_ORDER];

/// `chol(M)` for the given order, computed once per process.
fn fraction_factor(order: ModelOrder) -> Result<&'static DMatrix<f64>> {
    let d = order.get();
    FRACTION_FACTORS[d - 1]
        .get_or_init(|| linalg::cholesky(&fraction_matrix(d)))
        .as_ref()
        .ok_or_else(|| {
            Error::conditioning(format!(
                "Cholesky factorisation of the process-noise fraction matrix failed for d = {d}"
            ))
        })
}

/// Measurement row `H = [1, 0, …, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    h: RowDVector<f64>,
}

impl ObservationRow {
    pub fn new(order: ModelOrder) -> Self {
        let mut h = RowDVector::zeros(order.get());
        h[0] = 1.0;
        ObservationRow { h }
    }

    pub fn row(&self) -> &RowDVector<f64> {
        &self.h
    }
}

pub fn transition_matrix(order: ModelOrder, dt: f64) -> Result<TransitionMatrix> {
    TransitionMatrix::new(order, dt)
}

pub fn process_noise_base(order: ModelOrder, dt: f64) -> Result<ProcessNoiseBase> {
    ProcessNoiseBase::new(order, dt)
}

/// Transition and noise matrices for one step length.
#[derive(Debug, Clone, PartialEq)]
pub struct StepModel {
    pub transition: TransitionMatrix,
    pub noise: ProcessNoiseBase,
}

impl StepModel {
    pub fn new(order: ModelOrder, dt: f64) -> Result<Self> {
        Ok(StepModel {
            transition: TransitionMatrix::new(order, dt)?,
            noise: ProcessNoiseBase::new(order, dt)?,
        })
    }
}

/// Per-instance memo of step matrices keyed by the exact bit pattern of Δ.
///
/// On a uniform grid every step shares a single entry.
#[derive(Debug)]
pub struct StepCache {
    order: ModelOrder,
    entries: HashMap<u64, Arc<StepModel>>,
}

impl StepCache {
    pub fn new(order: ModelOrder) -> Self {
        StepCache {
            order,
            entries: HashMap::new(),
        }
    }

    pub fn get(&mut self, dt: f64) -> Result<Arc<StepModel>> {
        if let Some(s) = self.entries.get(&dt.to_bits()) {
            return Ok(Arc::clone(s));
        }
        let s = Arc::new(StepModel::new(self.order, dt)?);
        self.entries.insert(dt.to_bits(), Arc::clone(&s));
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_rel;
    use proptest::prelude::*;

    fn ord(d: usize) -> ModelOrder {
        ModelOrder::new(d).unwrap()
    }

    /// Composite Simpson quadrature of the defining integral, entrywise.
    /// (exp(F s) L)_i = s^(d−1−i)/(d−1−i)!
    fn qbar_by_quadrature(d: usize, dt: f64) -> DMatrix<f64> {
        let n = 2000;
        let h = dt / n as f64;
        let col = |s: f64| -> Vec<f64> {
            (0..d)
                .map(|i| s.powi((d - 1 - i) as i32) / factorial(d - 1 - i))
                .collect()
        };
        let mut acc = DMatrix::zeros(d, d);
        for k in 0..=n {
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let v = col(k as f64 * h);
            for i in 0..d {
                for j in 0..d {
                    acc[(i, j)] += w * v[i] * v[j];
                }
            }
        }
        acc * (h / 3.0)
    }

    #[test]
    fn order_bounds() {
        assert!(ModelOrder::new(0).is_err());
        assert!(ModelOrder::new(9).is_err());
        assert_eq!(ModelOrder::new(8).unwrap().get(), 8);
    }

    #[test]
    fn transition_examples() {
        assert_eq!(
            transition_matrix(ord(1), 7.3).unwrap().matrix(),
            &DMatrix::from_element(1, 1, 1.0)
        );
        assert_eq!(
            transition_matrix(ord(2), 0.5).unwrap().matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])
        );
        assert_eq!(
            transition_matrix(ord(3), 2.0).unwrap().matrix(),
            &DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 2.0, 0.0, 1.0, 2.0, 0.0, 0.0, 1.0])
        );
    }

    #[test]
    fn bad_steps_rejected() {
        for dt in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                transition_matrix(ord(2), dt),
                Err(Error::InvalidArgument(_))
            ));
            assert!(matches!(
                process_noise_base(ord(2), dt),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn noise_examples() {
        assert_eq!(
            process_noise_base(ord(1), 3.0).unwrap().matrix(),
            &DMatrix::from_element(1, 1, 3.0)
        );
        let q1 = process_noise_base(ord(2), 1.0).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0]);
        assert!(frobenius_rel(q1.matrix(), &want) < 1e-15);
        let q2 = process_noise_base(ord(2), 2.0).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[8.0 / 3.0, 2.0, 2.0, 2.0]);
        assert!(frobenius_rel(q2.matrix(), &want) < 1e-15);
    }

    #[test]
    fn noise_matches_quadrature() {
        for d in 1..=4 {
            for dt in [0.01, 0.7, 3.0, 25.0] {
                let closed = process_noise_base(ord(d), dt).unwrap();
                let quad = qbar_by_quadrature(d, dt);
                for i in 0..d {
                    for j in 0..d {
                        let rel = (closed.matrix()[(i, j)] - quad[(i, j)]).abs()
                            / quad[(i, j)].abs();
                        assert!(rel < 1e-8, "d={d} dt={dt} ({i},{j}) rel={rel:e}");
                    }
                }
            }
        }
    }

    #[test]
    fn factor_reproduces_noise_for_all_orders() {
        for d in 1..=MAX_ORDER {
            for dt in [1e-3, 0.5, 1.0, 40.0, 1e3] {
                let q = process_noise_base(ord(d), dt).unwrap();
                let l = q.factor();
                assert!(linalg::is_lower_triangular(l));
                let err = frobenius_rel(&(l * l.transpose()), q.matrix());
                assert!(err < 1e-12, "d={d} dt={dt} err={err:e}");
            }
        }
    }

    #[test]
    fn observation_row_selects_signal() {
        let h = ObservationRow::new(ord(4));
        assert_eq!(h.row().as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cache_shares_uniform_steps() {
        let mut c = StepCache::new(ord(3));
        let a = c.get(0.1).unwrap();
        let b = c.get(0.1).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        c.get(0.2).unwrap();
        assert_eq!(c.len(), 2);
    }

    proptest! {
        #[test]
        fn transition_semigroup(d in 1usize..=6, l1 in -3.0f64..3.0, l2 in -3.0f64..3.0) {
            let (d1, d2) = (10f64.powf(l1), 10f64.powf(l2));
            let o = ord(d);
            let sum = transition_matrix(o, d1 + d2).unwrap();
            let prod = transition_matrix(o, d2).unwrap().matrix()
                * transition_matrix(o, d1).unwrap().matrix();
            prop_assert!(frobenius_rel(&prod, sum.matrix()) <= 1e-12);
        }

        #[test]
        fn noise_composition(d in 1usize..=6, l1 in -3.0f64..3.0, l2 in -3.0f64..3.0) {
            let (d1, d2) = (10f64.powf(l1), 10f64.powf(l2));
            let o = ord(d);
            let a2 = transition_matrix(o, d2).unwrap();
            let composed = a2.matrix() * process_noise_base(o, d1).unwrap().matrix()
                * a2.matrix().transpose()
                + process_noise_base(o, d2).unwrap().matrix();
            let direct = process_noise_base(o, d1 + d2).unwrap();
            prop_assert!(frobenius_rel(&composed, direct.matrix()) <= 1e-10);
        }

        #[test]
        fn noise_positive_definite(d in 1usize..=6, l in -3.0f64..3.0) {
            let dt = 10f64.powf(l);
            let q = process_noise_base(ord(d), dt).unwrap();
            // Eigenvalues span many decades; test in the D-scaled frame where
            // positivity is equivalent and the spectrum is well resolved.
            let scaled = DMatrix::from_fn(d, d, |i, j| {
                q.matrix()[(i, j)]
                    / (dt.powi((2 * d - 1 - i - j) as i32))
            });
            prop_assert!(linalg::min_eigenvalue(&scaled) > 0.0);
            prop_assert!(q.matrix().diagonal().iter().all(|&x| x > 0.0));
        }
    }
}
