//! Small reverse-mode autodiff library over dense f64 matrices, with the
//! layers, optimizer and sampling utilities used by the signal-control
//! agent.

pub mod checkpoint;
pub mod dist;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{Conv1x1, Dense, EncoderLayer, GruCell, LayerNorm, MultiHeadAttention, PositionalEmbedding};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<NnError>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("invalid distribution: {0}")]
    Simplex(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}
