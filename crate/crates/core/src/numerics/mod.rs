//! Dense f64 tensors with reverse-mode gradients.
//!
//! Everything is double precision: at desk scale speed does not matter and
//! finite-difference gradient checks stay tight. The [`Tape`] records each
//! primitive application eagerly; [`Tape::backward`] replays it in reverse.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
