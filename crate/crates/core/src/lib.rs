//! LSTM regression of action-quality scores from clip-level features, with
//! cross-action training and transfer protocols and a synthetic data source.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod protocols;
pub mod synth;

pub use error::{Error, Result};
