//! Dense linear algebra, the encoder/heads network, cross-entropy, Adam and EMA.
//!
//! Everything here runs in `f64` and is deterministic given its inputs.

mod loss;
mod matrix;
mod network;
mod optim;

pub use loss::{mean_ce, weighted_masked_ce};
pub use matrix::DenseMatrix;
pub use network::{
    argmax_rows, encoder_backward, encoder_forward, head_backward, head_forward, softmax_rows,
    EncoderCache, Gradients, Linear, ModelParams,
};
pub use optim::{adam_step, ema_update, AdamConfig, AdamState, EmaParams};
