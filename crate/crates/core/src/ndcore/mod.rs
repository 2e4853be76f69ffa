//! Dense f64 tensors with a reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and are read by reference while recording, so a forward
//! pass never copies weights. [`Tape::backward`] returns [`Gradients`]
//! keyed by parameter, which [`AdamW::step`] consumes.

mod attention;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use attention::{init_normal, self_attention, AttentionParams};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{softmax_in_place, BatchLayout, Tape, Var};
pub use tensor::Tensor;
