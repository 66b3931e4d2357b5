//! Desk-scale reference implementation of a hybrid linear attention stack,
//! with a verification suite covering kernel equivalence, decode memory
//! cost, training/inference alignment under emulated low precision, and
//! clipped policy-gradient estimator gaps.

pub mod alignment;
pub mod cost_model;
pub mod error;
pub mod hybrid_model;
pub mod linear_attention;
pub mod moe;
pub mod numerics;
pub mod rl_objective;
pub mod softmax_attention;
pub mod trace;

pub use error::{Error, Result};
