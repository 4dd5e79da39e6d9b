//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Values live in [`Tensor`]s. A [`Tape`] records each primitive as it runs and
//! replays them backwards from a scalar loss. Trainable tensors are copied onto
//! the tape as leaves; after [`Tape::backward`] their gradients are read back with
//! [`Tape::accumulate_into`] and consumed by [`sgd_step`].

mod optim;
mod tape;
mod tensor;

pub use optim::{sgd_step, Adam};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
