//! Core of the kpgraph key-point matcher.
//!
//! Everything here is `no_std` with `alloc`: tensors with reverse-mode
//! differentiation, the patch CNN, the attentional graph network, the
//! contrastive objective, matching metrics and homography estimation.
//! File formats and the command-line tool live in the `kpgraph` crate.

#![no_std]

extern crate alloc;

pub mod cnn;
pub mod contrastive;
pub mod conv;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod gnn;
pub mod imaging;
pub mod matcher;
pub mod model;
pub mod mosaic;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod train;
pub mod views;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
