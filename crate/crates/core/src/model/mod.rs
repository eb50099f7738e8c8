//! ConformerXL acoustic model: configuration, parameters and the
//! inference-mode forward pass.

mod config;
mod forward;
pub mod layers;
mod params;
mod tensor;

pub use config::ModelConfig;
pub use forward::{
    conformer_block_forward, model_forward, prenet_forward, subsample_forward, subsampled_len,
};
pub use layers::rmsnorm;
pub use params::{param_count, param_shapes, init_params, ModelParams, ParamKind, ParamSpec};
pub use tensor::Tensor;
