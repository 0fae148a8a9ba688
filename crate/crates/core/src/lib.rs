//! Sparse-pose guided text-to-image diffusion at desk scale.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod kcl;
pub mod optim;
pub mod pose;
pub mod prompts;
pub mod sampler;
pub mod spr;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
