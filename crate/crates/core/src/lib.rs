//! Derivative estimation from noisy time series.
//!
//! The signal is modelled as a (d−1)-fold integrated Wiener process observed
//! with additive Gaussian noise. A square-root Kalman filter and
//! Rauch–Tung–Striebel smoother give the posterior of the signal and its
//! first d−1 derivatives; the model parameters (driving-noise intensity,
//! measurement variance and initial state) are fitted by maximum likelihood
//! with an EM iteration.
//!
//! ```no_run
//! use smoothderiv::{fit, EmConfig, ModelOrder, TimeSeries};
//!
//! let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
//! let y: Vec<f64> = t.iter().map(|s| (3.0 * s).sin()).collect();
//! let ts = TimeSeries::from_samples(&t, &y).unwrap();
//! let report = fit(&ts, ModelOrder::new(3).unwrap(), &EmConfig::default()).unwrap();
//! let velocity: Vec<f64> = report.smoothed.means.iter().map(|m| m[1]).collect();
//! # let _ = velocity;
//! ```

pub mod cli;
pub mod em;
pub mod error;
pub mod exec;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod smoother;

pub use em::{em_step, fit, fit_batch, init_params, minimize_q, EmConfig, FitReport};
pub use error::{Error, Result};
pub use exec::Execution;
pub use kalman::{forward_pass, ForwardRecord, ModelParams, SqrtGaussian, TimeSeries};
pub use model::{ModelOrder, ProcessNoiseBase, TransitionMatrix};
pub use smoother::{backward_pass, dense_predict, interpolant_samples, smooth, DenseState, SmoothResult};
