#![cfg_attr(not(test), no_std)]

//! Core library for zero-shot automated essay grading.
//!
//! Everything algorithmic lives here: corpus parsing and score
//! normalization, tokenization and encoding, gaze-label preparation, the
//! neural model with its reverse-mode autodiff engine, training, metrics,
//! and the cross-prompt experiment driver. The crate is `no_std` + `alloc`
//! so it can be embedded anywhere; all IO and file-format concerns live in
//! the companion CLI crate.

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gaze;
pub mod model;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod special;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
