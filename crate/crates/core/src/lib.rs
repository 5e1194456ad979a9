#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cap;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod midn;
pub mod refine;
pub mod scene;
pub mod score;

pub use error::{Error, Result};
