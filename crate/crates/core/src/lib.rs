//! Continual few-shot classification lab: a cosine-classifier network with
//! exact backprop, interpolation-based continual-learning strategies built
//! around a per-task knowledge base, synthetic incremental task streams, and
//! the displacement/forgetting instrumentation to compare them.

pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod param;
pub mod runner;
pub mod scalar;
pub mod store;
pub mod strategies;
pub mod taskgen;

pub use error::{Error, Result};

// Concrete f64 instantiations of the generic kernels; the orchestration
// layers (strategies, runner) work in f64 throughout.
pub type ParamVector = param::ParamVector<f64>;
pub type Gradients = param::Gradients<f64>;
pub type CosineClassifierNet = nn::CosineClassifierNet<f64>;
pub type CosineHead = nn::CosineHead<f64>;
pub type DenseLayer = nn::DenseLayer<f64>;
pub type Batch = nn::Batch<f64>;
pub type MarginConfig = losses::MarginConfig<f64>;
pub type LabeledEmbedding = losses::LabeledEmbedding<f64>;
