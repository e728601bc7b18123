//! Dense fp64 tensors, a reverse-mode tape, Adam, and the handful of layers
//! the guide network is built from.

mod adam;
mod grad_check;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grad_check::grad_check;
pub use layers::{CausalConv, Linear, Mlp, Mode};
pub use params::{xavier_uniform, Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
