//! Contextual probabilistic perceptual attribute predictor: an attention
//! based multimodal regressor that predicts a Gaussian over the pleasantness
//! of an augmented soundscape, with its training, ablation and analysis
//! tooling.

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod preprocessing;
pub mod training;

pub use data::{generate_synthetic_dataset, kfold_split, Manifest, Sample};
pub use error::{Error, Result};
pub use model::{Fusion, Model, ModelConfig, PredictedDistribution, Variant};
