//! Joint anomaly-image and annotation-mask generation with a two-stream
//! denoising diffusion backbone.
//!
//! The crate provides a small f64 tape-based differentiation engine, the
//! diffusion forward/reverse processes, the decoupled/entangled attention
//! blocks with their leakage probes, the two-stream U-Net, PPM/PGM dataset
//! tooling, and the training/generation/check command implementations used
//! by the `helix-diff` binary.

pub mod attention;
pub mod backbone;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod generate;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{finite_difference_grad, Tape, TensorId};
pub use tensor::{InitKind, ParamStore, Parameter, Tensor};
