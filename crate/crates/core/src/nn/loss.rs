use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Row-wise log-softmax of `B×C` logits via log-sum-exp. The row maximum is treated as
/// a constant shift, which leaves the value and the gradient unchanged.
pub fn log_softmax<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 {
        return shape_err(format!("softmax expects B×C logits, got {shape:?}"));
    }
    let m = g.max(z, &[1])?;
    let m = g.constant(g.value(m).clone());
    let m = g.expand(m, &shape)?;
    let shifted = g.sub(z, m)?;
    let e = g.exp(shifted)?;
    let s = g.sum(e, &[1])?;
    let lse = g.log(s)?;
    let lse = g.expand(lse, &shape)?;
    g.sub(shifted, lse)
}

pub fn softmax<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let ls = log_softmax(g, z)?;
    g.exp(ls)
}

/// One-hot rows for zero-based class indices.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} outside 0..{classes}")));
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Summed cross-entropy −Σᵢ Σ_c y_ic log p_ic, with p = softmax(logits) evaluated in log space.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return shape_err(format!(
            "targets {:?} do not match logits {:?}",
            targets.shape(),
            g.shape(logits)
        ));
    }
    let c = targets.shape()[1];
    for (i, row) in targets.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Contract(format!("target row {i} is not one-hot")));
        }
    }
    let lp = log_softmax(g, logits)?;
    let y = g.constant(targets.clone());
    let picked = g.mul(lp, y)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -T::one())
}

pub fn cross_entropy_labels<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.shape(logits).get(1).copied().unwrap_or(0);
    let y = one_hot(labels, classes)?;
    cross_entropy(g, logits, &y)
}
