//! Unified relevance and click-through-rate ranking.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`ops`], [`losses`], [`nn`]: dense `f64` arithmetic
//!   with reverse-mode gradients.
//! * [`data`]: a synthetic search world with relevance-gated exposure.
//! * [`encoder`]: a small transformer text encoder, its frozen teacher and
//!   SFT plus distillation pretraining.
//! * [`preference`]: cross-user behaviour mining and the incentive score.
//! * [`ctr`]: the relevance-decomposed click model and ranking score.
//! * [`debias`]: synthetic hard negatives and the pairwise debias loss.
//! * [`metrics`], [`train`]: training loop, offline metrics, experiments.

pub mod config;
pub mod ctr;
pub mod data;
pub mod debias;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod preference;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{Optimizer, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
