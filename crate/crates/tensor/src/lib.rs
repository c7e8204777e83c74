//! Dense f64 tensors with reverse-mode automatic differentiation, an Adam
//! optimizer, and a binary tensor container format.
//!
//! Values live in plain [`Tensor`] storage. Differentiation runs over a
//! per-forward [`Graph`]: copy leaves in, build ops, call
//! [`Graph::backward`] on a scalar, read gradients back out. Everything is
//! CPU f64 with deterministic loop ordering.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BnBatchStats, Graph, TensorId};
pub use optim::{decayed_lr, AdamConfig, AdamState};
pub use tensor::Tensor;
