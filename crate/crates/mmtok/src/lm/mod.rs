//! A small decoder-only transformer over the unified vocabulary.
//!
//! Pre-norm residual blocks (LayerNorm, causal multi-head attention, GELU
//! MLP), learned positional embeddings, untied output projection. All math
//! is f64 so gradients can be checked against finite differences; training
//! is Adam with linear warmup into a cosine schedule and global-norm
//! gradient clipping. Decoding covers length-normalized beam search and
//! nucleus sampling with repetition penalty.

pub mod checkpoint;
mod decode;
mod model;
mod tensor;
mod train;

pub use decode::{
    apply_repetition_penalty, generate, nucleus_filter, sample_from, softmax, DecodeMode,
    DecodeStrategy,
};
pub use model::{batch_loss_and_grads, batch_loss_and_grads_seq, expand_vocab, forward, init_model, nll_loss, ModelConfig, ModelParams};
pub use tensor::Tensor;
pub use train::{clip_gradients, lr_at, StepStats, TrainConfig, TrainSeq, Trainer};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary cannot shrink from {old} to {new}")]
    ShrinkNotAllowed { old: usize, new: usize },
    #[error("loss mask has no true positions")]
    EmptyMask,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("token {0} outside vocabulary")]
    TokenOutOfRange(u32),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("prompt of length {len} exceeds max_seq_len {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}
