//! Synthetic continual-segmentation benchmark, cascade model with parameter
//! isolation, baselines, and forgetting diagnostics.

pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod forgetting;
pub mod formats;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pretrain;
pub mod seed;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
