//! Sparse-patch video re-identification pipeline.

pub mod config;
pub mod costmodel;
mod error;
pub mod gopcodec;
pub mod gradsuite;
pub mod nn;
pub mod pipeline;
pub mod psformer;
pub mod selector;
pub mod spectral;
pub mod training;
pub mod videoio;

pub use error::{Error, ErrorKind, Result};
