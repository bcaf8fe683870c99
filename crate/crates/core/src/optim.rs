//! Momentum SGD with an optional fixed sparsity mask.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// One heavy-ball step: `v ← momentum·v + grad`, `param ← param − lr·v`.
///
/// Where `mask` is false the parameter and its velocity are forced to zero,
/// so a pruned position can never be revived.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: T,
    momentum: T,
    mask: Option<&[bool]>,
) -> Result<(), TensorError> {
    let n = param.numel();
    if grad.shape() != param.shape() || velocity.shape() != param.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "sgd_step",
            detail: format!(
                "param {:?}, grad {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                velocity.shape()
            ),
        });
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                detail: format!("mask has {} entries for {} parameters", m.len(), n),
            });
        }
    }
    let p = param.data_mut();
    let v = velocity.data_mut();
    let g = grad.data();
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            p[i] = T::zero();
            v[i] = T::zero();
            continue;
        }
        v[i] = momentum * v[i] + g[i];
        p[i] -= lr * v[i];
    }
    Ok(())
}
