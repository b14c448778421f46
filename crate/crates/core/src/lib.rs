//! Disentangled attention-only transformers for the inverse permutation
//! task: model, explicit weight constructions, training and probes.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is on;
//! `parallel` spreads per-instance gradient work over a rayon pool.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod constructions;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod task;
pub mod training;

pub use error::{Error, Result};
pub use model::{forward, readout, MaskMode, ModelWeights, ResidualStream};
pub use numerics::Matrix;
pub use task::{AssembledInput, Padding, Permutation, PermutationMatrix, TaskInstance};
