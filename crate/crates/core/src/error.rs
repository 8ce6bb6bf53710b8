use alloc::string::String;

use crate::model::TaskId;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { context: &'static str, expected: (usize, usize), found: (usize, usize) },

    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: char, position: usize },

    #[error("token id {id} is out of range for a vocabulary of {size}")]
    InvalidId { id: usize, size: usize },

    #[error("sequence of length {len} exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },

    #[error("input of {len} samples is shorter than the receptive field of {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("reference and hypothesis lists differ in length ({refs} vs {hyps})")]
    LengthMismatch { refs: usize, hyps: usize },

    #[error("total reference length is zero")]
    EmptyReference,

    #[error("task {0:?} is not part of the model's task set")]
    UnknownTask(TaskId),

    #[error("no task contributed a loss in this step")]
    EmptyStep,

    #[error("empty audio input")]
    EmptyAudio,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),
}
