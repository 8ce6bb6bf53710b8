//! IO and orchestration around `sttatts-core`: WAV and log-mel features,
//! Griffin-Lim, manifests and the synthetic corpus, checkpoints, the
//! training runner and the command-line interface.

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod runner;

pub use error::{Error, Result};
pub use sttatts_core as core;
