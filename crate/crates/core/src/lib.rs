//! Continuous-time convection–diffusion message passing on graphs.
//!
//! Node features evolve under an ODE that mixes attention-weighted diffusion
//! (smoothing) with velocity-scaled convection (transport). The crate provides
//! the graph substrate, a reverse-mode tape for training through the solver,
//! fixed- and adaptive-step integrators, the training loop, and the energy and
//! velocity analyses used to study oversmoothing.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dynamics;
pub mod encoding;
pub mod error;
pub mod graph;
pub mod model;
pub mod ode;
pub mod tensor;

pub use error::{GnsnError, Result};
