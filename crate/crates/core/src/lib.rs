//! Numerical laboratory for in-context learning of noisy linear dynamical
//! systems with linear-attention transformers.
//!
//! The crate covers both directions of the depth question:
//!
//! * an explicit deep transformer ([`richardson`]) whose layers unroll a
//!   modified Richardson iteration, so that its prediction tracks the
//!   least-squares one-step predictor ([`estimation`]) and the test loss decays
//!   like `log T / T`;
//! * the one-dimensional single-layer predictor ([`single_layer`]) whose
//!   limiting loss admits a closed form, and the min-max value of that loss over
//!   tasks ([`lower_bound`]) which stays strictly positive.
//!
//! [`moments`] holds exact Gaussian moment machinery used to audit the
//! closed-form identities behind the limiting loss, and [`experiments`] drives
//! seeded sweeps that write CSV artifacts.

// Negated comparisons are how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod experiments;
pub mod lds;
pub mod lower_bound;
pub mod mc;
pub mod moments;
pub mod richardson;
pub mod single_layer;
pub mod transformer;

pub use error::{Error, Result};
