//! Merchant-incentive learning-to-rank toolkit.
//!
//! Layers build on a small reverse-mode autodiff engine over `f64`
//! tensors. The commonly used types are re-exported at the crate root.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod features;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use autodiff::{grad_check, Graph, NodeId};
pub use datagen::{Dataset, WorldConfig};
pub use error::{Error, Result};
pub use features::{FeatureSchema, Impression, MCI_DIM};
pub use harness::{
    evaluate, sweep_lambdas, train, ExperimentData, PairwiseLoss, SweepGrid, SweepResult,
    TrainConfig,
};
pub use metrics::MetricsReport;
pub use models::{Architecture, Model, ModelSpec, Predictions};
pub use objectives::{LossWeights, ZRule};
pub use tensor::Tensor;
pub use verify::{run_verification, VerifyOptions, VerifyReport};
