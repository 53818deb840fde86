//! Deep conditional transformation models.
//!
//! A conditional transformation model describes the distribution of an
//! outcome `y` given features `x` as `P(Y <= y | x) = F_Z(h1(y | x) + h2(x))`,
//! where `F_Z` is a fixed log-concave error distribution, `h1` is a monotone
//! transformation built from a Bernstein polynomial basis in `y` whose
//! coefficients depend on `x`, and `h2` is an additive shift.
//!
//! This crate holds the algorithmic core and runs without `std` (it needs
//! `alloc`). File formats, the command line and parallel suite runners live
//! in the companion `ctmflow` crate.
//!
//! Layout:
//! - [`basis`]: Bernstein and B-spline bases, tensor products, difference penalties.
//! - [`error_dist`]: Gaussian, logistic and minimum extreme value error laws.
//! - [`terms`]: predictor terms, their design blocks and identifiability devices.
//! - [`deepnet`]: a small reverse-mode tape and the multilayer perceptron.
//! - [`model`]: monotone heads, the transformation likelihood and prediction.
//! - [`train`]: Adam with early stopping, smoothing calibration, gradient checks.
//! - [`simlab`]: data generating processes and evaluation metrics.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod basis;
pub mod data;
pub mod deepnet;
pub mod error;
pub mod error_dist;
pub mod linalg;
mod math;
pub mod model;
pub mod simlab;
pub mod terms;
pub mod train;

pub use basis::{BernsteinBasis, PenaltyMatrix, SplineBasis};
pub use data::Dataset;
pub use error::{CoreError, Result};
pub use error_dist::ErrorDistribution;
pub use linalg::Matrix;
pub use model::{Conditional, DctmModel, ModelSpec, Params};
pub use terms::{Side, Target, TermKind, TermSpec};
pub use train::{fit, FitConfig, TrainingLog};
