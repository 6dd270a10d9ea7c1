//! Ergodic risk-sensitive control (ERSC) for multiclass M/M/n+M queues in the
//! Halfin-Whitt regime.
//!
//! The crate covers both sides of the asymptotic-optimality picture:
//!
//! * the pre-limit side: the controlled queueing CTMC on a truncated lattice
//!   ([`ctmc`]), its risk-sensitive value as a Perron eigenvalue and policy
//!   iteration over server allocations ([`spectral`]);
//! * the limit side: the HJB eigenvalue problem of the limiting diffusion and
//!   its truncated zero-sum game ([`hjb`]);
//! * the variational (entropy tilting) representations that link the two,
//!   as Monte Carlo certifiers ([`variational`]), and the explicit Lyapunov
//!   function used for tightness diagnostics ([`lyapunov`]).
//!
//! [`harness`] wires everything into reproducible experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ctmc;
pub mod error;
pub mod harness;
pub mod hjb;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod par;
pub mod rng;
pub mod spectral;
pub mod variational;

pub use error::{Error, Result};
