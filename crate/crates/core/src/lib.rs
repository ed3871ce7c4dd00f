// SPDX-License-Identifier: MIT OR Apache-2.0

//! # steerid
//!
//! Constructive identifiability analysis for activation-steering vectors.
//!
//! The crate builds small differentiable networks with a single injection
//! site, computes the output Jacobian with respect to the injected state,
//! and uses its null space and gauge symmetries to construct steering
//! vectors that are observationally equivalent to a given one. The
//! [`harness`] module runs the behavioural protocols (orthogonal
//! perturbation, scale sweep, multi-environment, logit-level) on toy
//! networks or on tensor dumps exported from real models.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the double-precision instantiation used by the harness.

pub mod dumpio;
pub mod error;
pub mod harness;
pub mod jacobian;
pub mod probes;
pub mod scalar;
pub mod seeds;
pub mod stats;
pub mod steering;
pub mod toynet;

pub use error::{Error, ErrorClass, Result};
pub use scalar::{Dual, ForwardScalar, Real};

pub type ToyNet64 = toynet::ToyNet<f64>;
pub type ToyNet32 = toynet::ToyNet<f32>;
pub type PromptInput64 = toynet::PromptInput<f64>;
pub type SteeredOutput64 = toynet::SteeredOutput<f64>;
pub type JacobianAnalysis64 = jacobian::JacobianAnalysis<f64>;
pub type JacobianAnalysis32 = jacobian::JacobianAnalysis<f32>;
pub type SteeringVector64 = steering::SteeringVector<f64>;
pub type GaugeMap64 = steering::GaugeMap<f64>;
pub type FisherDiagnostics64 = stats::FisherDiagnostics<f64>;

/// Toolkit version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
