//! Unseen-domain generalization with an invertible flow.
//!
//! A class-conditional affine-coupling flow models the training environment,
//! and a small CNN is trained on the source data plus hard examples found by
//! gradient ascent on classifier loss minus a latent transport cost. The
//! autodiff engine, models and training loops are all in this crate; the
//! `unvp` binary lives in `unvp-cli`.

pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod distance;
pub mod error;
pub mod flow;
pub mod generalize;
pub mod gradcheck;
pub mod params;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
