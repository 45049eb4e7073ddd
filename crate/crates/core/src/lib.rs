// Range checks are written `!(x >= lo)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod labeling;
pub mod nn;
pub mod signal;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
