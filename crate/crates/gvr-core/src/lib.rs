//! Differentiable-programming core for the rationale pipeline.
//!
//! Provides a tape-based reverse-mode autodiff engine whose backward pass
//! emits ordinary graph nodes (so gradients are themselves differentiable —
//! required for the critic's gradient penalty), im2col convolution kernels
//! closed under differentiation, named parameter storage, ADAM, deterministic
//! ChaCha20 RNG streams and a versioned binary checkpoint container.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod nn;
pub mod optimizer;
pub mod rng;
pub mod tape;

pub use error::CoreError;
pub use nn::{ParamId, ParamStore};
pub use optimizer::Adam;
pub use tape::{Tape, Var};
