//! Core-set token selection for transformer encoders.
//!
//! The crate is organized bottom-up:
//!
//! - [`selectors`]: k-Center greedy (batched), an exact k-Center oracle and
//!   the baseline selectors.
//! - [`schedule`]: per-layer sequence-length schedules.
//! - [`encoder`]: a small trainable encoder stack with a token-reduction hook
//!   inside every layer, exact backpropagation and model files.
//! - [`analysis`]: speedup and memory formulas, Pareto interpolation,
//!   selection-loss audits, mutual information and redundancy reports.
//! - [`harness`]: synthetic data, fine-tuning, evaluation and sweeps.

pub mod analysis;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod io;
pub mod matrix;
pub mod par;
pub mod schedule;
pub mod selectors;

pub use error::{Error, Result};
pub use matrix::{EmbeddingMatrix, Matrix};
