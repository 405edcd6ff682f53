//! Knowledge transfer between pretrained models on a small reverse-mode
//! autodiff core. See the `examples/` directory for end-to-end programs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod partition;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
