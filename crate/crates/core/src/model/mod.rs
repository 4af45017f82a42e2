//! Toy CTC encoder with low-rank adapters on attention projections.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{load_model, model_from_json, model_to_json, save_model, MODEL_FORMAT, MODEL_VERSION};
pub use config::{ModelConfig, Projection};
pub use network::{ForwardCache, GradientSet, ParamSubset};
pub use params::{Adapter, Adapters, BaseWeights, Block, LayerNorm, Linear, ModelState, LORA_A_STD};
