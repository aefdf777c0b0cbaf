//! Toy vision transformer: patch embedding, pre-norm blocks with multi-head
//! self-attention and a GELU MLP, class-token or mean pooling, and a linear
//! head. The forward pass records everything needed for the hand-written
//! backward pass and exposes the attention matrices for label alignment.

mod backward;
pub mod checkpoint;
mod config;
mod forward;
pub mod layers;
mod params;

pub use backward::model_backward;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, Pooling};
pub use forward::{
    block_forward, extract_patches, mhsa_forward, model_forward, model_logits, patch_embed,
    AttentionTrace, BlockCache, ForwardOutput, ForwardTrace,
};
pub use params::{is_decayed, AttentionMode, LayerParams, ModelParams, ParamGrads};
