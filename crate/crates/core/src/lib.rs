//! Distributional surrogate models: predict the whole outcome distribution of a
//! stochastic system from numeric and categorical configuration inputs.
//!
//! Each configuration's replicates are summarized by a monotone I-spline
//! quantile fit, the coefficient matrix is decorrelated by SVD, and every
//! retained score column gets its own Gaussian-process model (GP, CGP, LMGP or
//! LMGP-S) estimated by EM.

pub mod curve;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod lmgp;
pub mod model;
pub mod nnls;
pub mod optim;
pub mod pipeline;
pub mod quadrature;
pub mod reduction;

pub use error::{Error, Result};
