//! Flow matching with asynchronous, per-position noise schedules for
//! temporal point processes.
//!
//! Events `(tau, k)` are embedded by a β-VAE ([`vae`]); sequences of latents are
//! diffused under a diagonal matrix schedule `A(s)` ([`schedule`]) and a small
//! diffusion transformer ([`dit`]) is trained with the conditional
//! flow-matching objective ([`training`]). Forecasting solves the conditional
//! generative ODE on a breakpoint-aligned grid ([`forecast`]); [`metrics`]
//! scores the results.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dit;
pub mod error;
pub mod forecast;
pub mod metrics;
pub mod numgrad;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type ParamSet64 = params::ParamSet<f64>;
pub type Vae32 = vae::Vae<f32>;
pub type Vae64 = vae::Vae<f64>;
pub type Dit32 = dit::Dit<f32>;
pub type Dit64 = dit::Dit<f64>;
/// Exact flow-time arithmetic for schedule checks.
pub type Rational = num_rational::Ratio<i64>;
pub type BigRational = num_rational::BigRational;
