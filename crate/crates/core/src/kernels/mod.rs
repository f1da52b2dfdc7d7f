//! Minimal reverse-mode kernels: the tensor type, an eager graph with the
//! ops the detector needs, Adam with a one-cycle schedule, checkpoint IO,
//! and finite-difference checking.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub(crate) use graph::wrap_half_turn;
pub use graph::{Graph, Taps, Var};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState, OneCycle};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
