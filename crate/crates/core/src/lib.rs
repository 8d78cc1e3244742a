//! Layer-wise Hessian trace estimation for neural-network training diagnostics.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a reverse-mode tape whose backward pass is itself taped,
//!   giving exact Hessian-vector products.
//! - [`model`]: small MLPs (including tied-weight layers) recorded on the tape.
//! - [`oracle`]: dense Hessian assembly for brute-force reference values.
//! - [`estimator`]: Hutchinson per-layer traces, the single-pass scheme and the
//!   Frobenius companion estimator.
//! - [`variance`]: closed-form variance, anisotropy and the critical probe count.
//! - [`cusum`]: Phase-I baselines, two-sided CUSUM and ARL₀ threshold calibration.
//! - [`harness`]: synthetic data, monitored SGD training and the detection pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cusum;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod partition;
pub mod stats;
pub mod variance;

pub use error::{Error, Result};
pub use partition::{ParamGroup, ParamPartition};
