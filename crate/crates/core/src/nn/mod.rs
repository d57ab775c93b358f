//! Minimal tensor engine for the trainable denoiser: a dense NCHW tensor, a
//! reverse-mode tape over the handful of operators the network uses, the
//! network definitions themselves, and Adam.

mod adam;
mod network;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use network::{loss_and_grads, sinusoidal_embedding, Architecture, MlpSpec, Network, Params, UnetSpec};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};
