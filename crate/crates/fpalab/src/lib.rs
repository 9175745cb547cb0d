//! Desk-scale laboratory for feature-permutation transfer attacks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense row-major `f32` tensors;
//! * [`autodiff`] — a flat reverse-mode tape over those tensors;
//! * [`fp`] — the feature-permutation layer: channel masks, permutation
//!   plans, and their gather/scatter application;
//! * [`seeds`] — master-seed to stream-seed derivation;
//! * everything above (models, attacks, experiment harness) builds on these.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod fp;
pub mod harness;
pub mod seeds;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod zoo;

pub use error::{Error, Result};
