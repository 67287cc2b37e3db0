//! Dense `f64` tensors with an eager reverse-mode tape.
//!
//! Provides the layers the ReCoAt model is built from (dense, ELU, dropout,
//! 1-D convolution, LSTM, a strided 2-D CNN encoder), a finite-difference
//! gradient checker, named parameter stores partitioned per decoder, and the
//! `RCAT` checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use layers::{ConvBlock, Mode, Padding};
pub use params::{fan_in_uniform, GradStore, ParamStore, Partition};
pub use tensor::Tensor;
