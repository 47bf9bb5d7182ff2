// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod config;
pub mod constants;
pub mod delay_measure;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod regression;
pub mod regularity;

pub use error::{Error, Result};
