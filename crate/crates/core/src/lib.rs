//! Continual adaptation of a small CTC sequence model.
//!
//! A frozen transformer encoder is adapted segment by segment through
//! low-rank adapters on its attention query/value projections. Forgetting of
//! the general domain is controlled by multi-domain experience replay with
//! hard-example mining and by an elastic penalty weighted with mean absolute
//! gradients.

// `!(x >= 0.0)` is how validation rejects NaN along with negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod continual;
pub mod ctc;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod stream;
pub mod tensor;
pub mod train;
pub mod validate;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
