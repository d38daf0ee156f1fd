//! Minimal reverse-mode tensor engine.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! them in reverse. Values are `f64` throughout. Reductions run in a fixed
//! order, so identical inputs give bit-identical values and gradients.

mod tape;
mod tensor;

pub use tape::{Gradients, SparseMap, SparseMapBuilder, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::canonical_sum;

use crate::error::Result;

/// Tempered softmax of a plain vector, outside any tape.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(logits));
    let p = tape.softmax_t(x, temperature)?;
    Ok(tape.value(p).data().to_vec())
}
