//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
pub(crate) mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{reflect_index, Conv2dGeometry, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

/// Softmax along `axis` of a plain tensor, outside any record.
pub fn softmax<T: Real>(logits: &Tensor<T>, axis: usize) -> crate::Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let y = tape.softmax(x, axis)?;
    Ok(tape.tensor(y))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
