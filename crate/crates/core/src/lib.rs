// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod grid;
pub mod lq;
pub mod measure;
pub mod mfg0;
pub mod model;
pub mod numerics;
pub mod pde;
pub mod rng;
pub mod tree;
pub mod variational;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
