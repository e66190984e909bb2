//! Dense matrices, a recorded-operation tape with hand-written adjoints,
//! and a finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{
    grad_check, relative_error, GradCheckReport, ParamCheck, ParamSet, DEFAULT_EPS,
    DEFAULT_THRESHOLD,
};
pub use matrix::{cosine, l2_norm, log_sum_exp, softmax_in_place, Matrix};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Cross-entropy of a single `1 x N` logit row and its gradient
/// `softmax(logits) - one_hot(label)`.
pub fn cross_entropy_from_logits(logits: &Matrix, label: usize) -> Result<(f64, Matrix)> {
    if logits.rows() != 1 {
        return Err(Error::Shape {
            op: "cross_entropy_from_logits",
            left: logits.shape(),
            right: (1, logits.cols()),
        });
    }
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone(), true);
    let loss = tape.softmax_cross_entropy(l, &[label])?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads.get(l)))
}
