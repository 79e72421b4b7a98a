//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{softmax_rows, GradientMap, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Softmax of a single vector, optionally restricted to `mask == true`.
pub fn softmax(v: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let t = Tensor::row(v.to_vec());
    Ok(softmax_rows(&t, mask)?.into_data())
}
