//! Unified speech-to-text and text-to-speech model: tensors and autograd,
//! text processing, the shared encoder-decoder, training objectives,
//! optimization and decoding. Everything here is `no_std` + `alloc`; file
//! formats and audio live in the companion `sttatts` crate.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod error;
#[cfg(test)]
mod fixtures;
pub mod graph;
pub mod infer;
pub mod losses;
pub mod lr;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod textproc;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig, TaskId};
pub use params::{Grads, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
