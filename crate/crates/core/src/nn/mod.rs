//! Minimal dense tensors with reverse-mode differentiation, the layers the
//! sampler policy needs, AdamW, and the checkpoint file.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
pub use graph::{Gradients, Graph, Var};
pub use layers::{EncoderBlock, FeedForward, ForwardCtx, LayerNorm, Linear, SelfAttention};
pub use optim::{AdamW, ParamId, Parameter, ParameterStore};
pub use tensor::Tensor;
