//! Recurrent sequence models trained inside convex sets that certify
//! incremental ℓ2 stability or a prescribed incremental ℓ2-gain bound.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod certificates;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod numerics;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
