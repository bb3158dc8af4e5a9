use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Mean softmax cross-entropy of `logits` (`[B, N]`) against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (rows, classes) = (shape[0], shape[1]);
    let mut one_hot = vec![0.0; rows * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(AutodiffError::LabelOutOfRange { label, classes });
        }
        one_hot[r * classes + label] = 1.0;
    }
    // Row maxima are held constant; log-sum-exp is shift invariant so the
    // gradient is unaffected.
    let maxima: Vec<f64> = tape
        .value(logits)
        .data()
        .chunks(classes)
        .flat_map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            std::iter::repeat_n(m, classes)
        })
        .collect();
    let maxima = tape.constant(Tensor::from_parts(&shape, maxima));
    let shifted = tape.sub(logits, maxima)?;
    let e = tape.exp(shifted)?;
    let total = tape.row_sum(e)?;
    let lse = tape.log(total)?;
    let lse = tape.col_expand(lse, classes)?;
    let log_probs = tape.sub(shifted, lse)?;
    let one_hot = tape.constant(Tensor::from_parts(&shape, one_hot));
    let picked = tape.mul(log_probs, one_hot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// Cross-entropy of a single logit vector `[N]`.
pub fn cross_entropy_single(tape: &mut Tape, logits: Var, label: usize) -> Result<Var, AutodiffError> {
    let n = tape.value(logits).numel();
    let row = tape.reshape(logits, &[1, n])?;
    cross_entropy(tape, row, &[label])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
