//! Tensors, reverse-mode differentiation, and the Transformer blocks built on
//! them.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod positional;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, gradient_check_params, gradient_check_prefix, GradientReport};
pub use graph::{AttentionShape, Graph, Var};
pub use layers::{
    DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention, SeqShape,
    TransformerDecoder, TransformerDims, TransformerEncoder,
};
pub use params::{Param, ParamId, ParamStore};
pub use positional::sinusoidal_positional_encoding;
pub use tensor::Tensor;
