//! Conformer-based CSI feedback autoencoder with vector-quantized feedback.

pub mod autodiff;
pub mod channel;
pub mod checkpoint;
pub mod cli;
pub mod conformer;
pub mod dataset;
pub mod error;
pub mod flops;
pub mod params;
pub mod quant;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
