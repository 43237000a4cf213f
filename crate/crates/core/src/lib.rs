#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod controller;
pub mod error;
pub mod harness;
pub mod history;
pub mod model;
pub mod plant;

pub use error::{Error, Result};
