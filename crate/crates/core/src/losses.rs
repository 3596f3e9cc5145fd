//! Loss building blocks composed from tape operations.

use crate::tape::Var;
use crate::tensor::Tensor;

/// Mean squared error over all elements.
pub fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let d = a.sub(b);
    d.mul(d).mean()
}

/// Mean of `-ln p[label]` over rows of a probability matrix.
pub fn cross_entropy<'t>(probs: Var<'t>, labels: &[usize]) -> Var<'t> {
    probs.pick(labels.to_vec()).ln().mean().neg()
}

/// Cross entropy from unnormalised logits through a stable log-softmax.
pub fn softmax_cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    logits.log_softmax_rows().pick(labels.to_vec()).mean().neg()
}

/// Mean binary cross entropy of probabilities `p` (`n × 1`) against 0/1 labels.
pub fn binary_cross_entropy<'t>(p: Var<'t>, labels: &[f64]) -> Var<'t> {
    let n = labels.len() as f64;
    let y = Tensor::column(labels.to_vec());
    let one_minus_y = y.map(|v| 1.0 - v);
    let log_p = p.ln();
    let log_q = p.neg().add_scalar(1.0).ln();
    let pos = log_p.weighted_sum(y.into_data());
    let neg = log_q.weighted_sum(one_minus_y.into_data());
    pos.add(neg).scale(-1.0 / n)
}
