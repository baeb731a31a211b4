//! Trajectory-grounded flow matching for joint audio-video generation.
//!
//! The crate covers the conditioning path (trajectory pooling, latent
//! projection, masks, latent injection), the kinematics branch that feeds
//! audio (finite differences, compression, normalization, an MLP encoder
//! and a gated cross-attention block), the hybrid flow-matching objective,
//! and the evaluation metrics (TE, ETE, MAIC). A small pixel-space toy
//! generator exercises the objective end to end.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod injection;
pub mod io;
pub mod kinematics;
pub mod latent;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod trajectory;

pub use error::{Error, Result};
pub use rng::Seed;
pub use tensor::Tensor;
