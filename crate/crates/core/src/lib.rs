//! Label-free neural surrogates for steady boundary-value problems, trained
//! on a discretized finite-element weak-form residual.

#![allow(clippy::needless_range_loop)]

pub mod fem;
pub mod grid;
pub mod par;
pub mod physics;
pub mod residual;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod uq;
