//! Object-context modelling: networks that score where an object should be
//! from its surroundings alone, and the retrieval pipeline that combines
//! those scores with detector output to find missing or out-of-context
//! objects.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod inference;
pub mod network;
pub mod retrieval;
pub mod sampling;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
