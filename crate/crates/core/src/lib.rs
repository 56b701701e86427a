//! Continual fine-tuning of a multi-domain decision transformer.

pub mod envsdata;
pub mod error;
pub mod harness;
pub mod model;
pub mod modulators;
pub mod numerics;
pub mod regularizers;
pub mod trajectory;

pub use error::{Error, Result};
