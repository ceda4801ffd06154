//! Target-dependent multimodal transformer for judging whether a candidate
//! image region is the object a fetching instruction refers to.

pub mod checkpoint;
pub mod data;
pub mod embedders;
mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod tokenizer;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};

pub use numerics::{Mode, Prng, Tensor};

pub use model::{Example, Fusion, ModelConfig, ModelParams, Prediction};
pub use train::{accuracy, evaluate, select_final, ConfusionMatrix, TrainConfig, TrainLog};
