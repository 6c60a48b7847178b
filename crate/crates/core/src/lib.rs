pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod format;
pub mod metrics;
pub mod numerics;
pub mod seq;
pub mod synth;
pub mod topic;
pub mod vq;

pub use error::{Error, Result};
