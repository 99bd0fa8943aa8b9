//! Numerical core for topology-aware, parameter-efficient binary segmentation.
//!
//! Everything here is pure computation over `alloc` collections: a dense
//! [`Tensor`] type with a reverse-mode [`Tape`], the differentiable training
//! objectives (BCE, soft Dice, clDice over a soft skeleton), LoRA and
//! depthwise-separable adapter layers, the evaluation metric suite, a
//! deterministic synthetic thin-structure generator, AdamW with cosine
//! annealing, and a small segmenter that ties them together.
//!
//! File formats, reports and the command-line tool live in the `thinseg`
//! companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
mod math;

pub mod autodiff;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod peft;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, PoolKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
