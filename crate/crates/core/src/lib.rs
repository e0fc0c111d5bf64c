//! Multi-layered tensor network image classifiers: dense tensor kernels,
//! MPS blocks with hand-written gradients, the layered model and its
//! baselines, training utilities, data loading and cost estimates.

pub mod complexity;
pub mod data;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{
    AnyModel, Classifier, FeatureMap, Gradients, LotenetConfig, LotenetModel, MlpConfig, MlpModel, MltnConfig,
    MltnModel, Mode, MpsBlock, MpsInit, SqueezeSpec, TenetXConfig, TenetXModel,
};
pub use tensor::Tensor;
