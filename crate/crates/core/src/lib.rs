//! Self-ensembling semi-supervised training.
//!
//! Two algorithms built on one small network core:
//!
//! * the Π-model, which evaluates every input twice under independent noise,
//!   dropout and augmentation and penalizes the squared difference between
//!   the two predictions, and
//! * temporal ensembling, which evaluates every input once per epoch and
//!   penalizes the distance to a bias-corrected exponential moving average
//!   of earlier predictions.
//!
//! Supervised-only training is available as a baseline. Everything is
//! seeded; see [`rng`] for how streams are derived.

pub mod augment;
pub mod config;
pub mod consistency;
pub mod data;
pub mod error;
pub mod formats;
pub mod history;
pub mod layers;
pub mod nn;
pub mod optimize;
pub mod rng;
pub mod schedules;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
