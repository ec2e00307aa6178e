//! Numeric substrate for the sparse-patch video pipeline.
//!
//! Everything is `f64`. [`Tensor`] values are immutable once built and cheap
//! to clone (the buffer is reference counted). Differentiation goes through a
//! [`Graph`], a dynamically recorded tape that is seeded from a scalar loss.

pub mod eig;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod macs;
pub mod params;
pub mod rng;
pub mod tensor;

pub use eig::{sym_eig, SymEig};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_pair, grad_check_params, GradCheckReport, ParamProbe};
pub use graph::{saturating_sigmoid, saturating_sigmoid_slope, Conv3dSpec, Graph, Var};
pub use macs::MacCounter;
pub use params::ParamSet;
pub use rng::{seeded_gaussian, seeded_rng, seeded_uniform, SplitSeed};
pub use tensor::Tensor;
