//! Hybrid CNN/Transformer segmentation network: two encoder branches fused
//! per level by squeeze-and-excitation, atrous spatial pyramid pooling at
//! the bottleneck, attention-gated skip connections, and a BCE-Dice
//! objective, all on a small `f64` reverse-mode autodiff engine.

pub mod aspp;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gates_decoder;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objective;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
