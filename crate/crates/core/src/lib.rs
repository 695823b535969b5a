//! Graph-based multi-teacher knowledge distillation.
//!
//! Several frozen teachers, each pretrained on a different self-supervised
//! pretext task, transfer knowledge into a smaller student through two
//! weighting structures:
//!
//! - a logits graph whose learnable edges weight per-teacher Earth-Mover
//!   imitation losses between softened teacher outputs and the student;
//! - a representation graph whose vertices are compact-bilinear-pooled pairs
//!   of teacher features, distilled into the student's tap layer under a
//!   Gaussian-kernel MMD.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and the
//! ablation harness live in the `graphkd` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
mod math;

pub mod data;
pub mod fft;
pub mod graphs;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod sketch;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
