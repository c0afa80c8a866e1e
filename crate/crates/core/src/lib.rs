//! Detector model, training objective, data pipeline, training loop,
//! pruning and evaluation for a compact two-class fruit detector.

pub mod augment;
pub mod blocks;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod params;
pub mod postprocess;
pub mod pruner;
pub mod synth;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use model::{build_model, HeadKind, Model, ModelConfig, NeckKind};
