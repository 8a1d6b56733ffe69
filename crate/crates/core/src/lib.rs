//! Pass-rate weighted distillation toolkit.
//!
//! Weights each training problem by `p^α (1-p)^β` where `p` is the student's
//! empirical pass rate, and ships the calculators that go with it: descent
//! rate and minimax robustness, batch variance ratios, cross-problem gradient
//! SNR profiles, and a small synthetic distillation simulator.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Published approximation coefficients are kept digit for digit.
#![allow(clippy::excessive_precision)]
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod kernel;
pub mod numerics;
pub mod passrate;
pub mod robustness;
pub mod sim;
pub mod snr_profile;
pub mod variance;

pub use error::{Error, Result};
