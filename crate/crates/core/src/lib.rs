//! Dual-stream pixel-space diffusion transformer.
//!
//! A Semantics Flow processes large patches and emits anchors; a fine stream
//! of small patches cross-attends to them through hyper-connectors. Both
//! streams share a scale-aligned rotary position embedding.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow_matching;
pub mod hyper_connector;
pub mod model;
pub mod module;
pub mod nn;
pub mod optim;
pub mod patching;
pub mod runtime;
pub mod sa_rope;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod vfm;

pub use config::{CfgPolicy, ModelConfig, Parameterization, PathsConfig, RunConfig, SamplerConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{count_parameters, HyperDit};
pub use module::Module;
pub use scalar::Scalar;
pub use tensor::{ImageTensor, PatchGrid, TokenPosition, TokenScale, TokenSequence};
