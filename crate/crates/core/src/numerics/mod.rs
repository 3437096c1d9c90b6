//! Dense tensors, reverse-mode differentiation and the neural primitives
//! the architecture is assembled from.

pub mod fd;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use fd::{finite_diff_at, finite_diff_grad, max_relative_error, relative_error, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use ops::*;
pub use params::{seeded_rng, Bindings, BnId, Forward, ModelRng, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
