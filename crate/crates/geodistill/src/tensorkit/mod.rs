//! Minimal dense-matrix math with reverse-mode differentiation.
//!
//! Just enough for the three small heads (adapter, uncertainty head,
//! mask head) and the loss expressions built on top of them.

mod matrix;
mod params;
mod tape;

pub use matrix::Matrix;
pub use params::{names, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
