//! Decoder-only transformer with explicit residual-stream bookkeeping.

pub mod backward;
pub mod config;
pub mod forward;
pub mod params;

pub use backward::{backward, batch_loss_and_grads};
pub use config::{ModelConfig, PositionalKind};
pub use forward::{decoder_block_forward, gelu, model_forward, sequence_nll, unembed_hidden, ForwardOutput, LayerTrace, ResidualTrace};
pub use params::{AttentionParams, FfnParams, LayerNormParams, LayerParams, TransformerParams};
