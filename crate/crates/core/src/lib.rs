// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cdis;
pub mod cli;
pub mod config;
pub mod cube;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod manifest;
pub mod nifti;
pub mod optimizer;
pub mod pgm;
pub mod phantom;
pub mod report;
pub mod roc;
pub mod simplex;
pub mod stackdir;
pub mod volume;

pub use error::{Error, Result};
