//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Tensors enter the tape either as constants ([`Tape::constant`]) or as
//! trainable parameters ([`Tape::param`]); [`Tape::backward`] returns
//! gradients for the parameters only. Nodes that cannot reach a parameter
//! are never differentiated through.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;
use crate::tensor::{self, BnMode, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    Relu(usize),
    Add(usize, usize),
    AvgPool {
        x: usize,
        k: usize,
    },
    Reshape(usize),
    SoftmaxXent {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Mse {
        pred: usize,
        target: Tensor<T>,
    },
    WeightedSum {
        x: usize,
        weights: Tensor<T>,
    },
    Sum(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: bool,
    needs_grad: bool,
}

/// Ordered record of one forward pass.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the registered parameters, keyed by their handle.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: false,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records a tensor that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: false,
            needs_grad: false,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: true,
            needs_grad: true,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("var from this tape")].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let y = tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(y, Op::MatMul(ia, ib), &[ia, ib]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let y = tensor::linear(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            ib.map(|i| &self.nodes[i].value),
        )?;
        let mut ins = vec![ix, iw];
        ins.extend(ib);
        Ok(self.push(
            y,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
            },
            &ins,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let y = tensor::conv2d(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            ib.map(|i| &self.nodes[i].value),
            stride,
            padding,
        )?;
        let mut ins = vec![ix, iw];
        ins.extend(ib);
        Ok(self.push(
            y,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                stride,
                padding,
            },
            &ins,
        ))
    }

    /// Batch norm; in training mode also returns the updated running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: BnMode,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let (ix, ig, ibt) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let fwd = tensor::batchnorm2d(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ibt].value,
            running_mean,
            running_var,
            mode,
        )?;
        let op = Op::BatchNorm {
            x: ix,
            gamma: ig,
            beta: ibt,
            xhat: fwd.xhat,
            inv_std: fwd.inv_std,
            mode,
        };
        Ok((self.push(fwd.y, op, &[ix, ig, ibt]), fwd.running))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = tensor::relu(&self.nodes[ix].value);
        Ok(self.push(y, Op::Relu(ix), &[ix]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let y = tensor::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(y, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = tensor::avgpool2d(&self.nodes[ix].value, k)?;
        Ok(self.push(y, Op::AvgPool { x: ix, k }, &[ix]))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = tensor::flatten(&self.nodes[ix].value);
        Ok(self.push(y, Op::Reshape(ix), &[ix]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = self.nodes[ix].value.reshape(shape)?;
        Ok(self.push(y, Op::Reshape(ix), &[ix]))
    }

    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (loss, probs) = tensor::softmax_xent_with_probs(&self.nodes[il].value, labels)?;
        let op = Op::SoftmaxXent {
            logits: il,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[il]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let ip = self.idx(pred)?;
        let loss = tensor::mse(&self.nodes[ip].value, target)?;
        let op = Op::Mse {
            pred: ip,
            target: target.clone(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[ip]))
    }

    /// `Σ x ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let s = xv.zip_map(weights, "weighted_sum", |a, b| a * b)?.sum();
        let op = Op::WeightedSum {
            x: ix,
            weights: weights.clone(),
        };
        Ok(self.push(Tensor::scalar(s), op, &[ix]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), &[ix]))
    }

    /// Reverse accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(Tensor::ones(lv.shape()));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |j: usize| &self.nodes[j].value;
            let wants = |j: usize| self.nodes[j].needs_grad;
            let mut acc = |j: usize, t: Tensor<T>| accumulate(&mut grads[j], t);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ga, gb) = tensor::matmul_backward(val(*a), val(*b), &g);
                    if wants(*a) {
                        acc(*a, ga);
                    }
                    if wants(*b) {
                        acc(*b, gb);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = tensor::linear_backward(val(*x), val(*w), &g);
                    if wants(*x) {
                        acc(*x, gx);
                    }
                    if wants(*w) {
                        acc(*w, gw);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            acc(*b, gb);
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (gx, gw, gb) =
                        tensor::conv2d_backward(val(*x), val(*w), &g, *stride, *padding);
                    if wants(*x) {
                        acc(*x, gx);
                    }
                    if wants(*w) {
                        acc(*w, gw);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            acc(*b, gb);
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let (gx, gg, gb) =
                        tensor::batchnorm2d_backward(xhat, inv_std, val(*gamma), &g, *mode);
                    if wants(*x) {
                        acc(*x, gx);
                    }
                    if wants(*gamma) {
                        acc(*gamma, gg);
                    }
                    if wants(*beta) {
                        acc(*beta, gb);
                    }
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    let gx = Tensor::from_fn(xv.shape(), |k| {
                        if xv.data()[k] > T::zero() {
                            g.data()[k]
                        } else {
                            T::zero()
                        }
                    });
                    acc(*x, gx);
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(*a, g.clone());
                    }
                    if wants(*b) {
                        acc(*b, g);
                    }
                }
                Op::AvgPool { x, k } => {
                    acc(*x, tensor::avgpool2d_backward(val(*x).shape(), *k, &g));
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(val(*x).shape())?;
                    acc(*x, gx);
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.item() / T::from_usize_lossy(labels.len());
                    let k = probs.shape()[1];
                    let mut gl = probs.clone();
                    for (row, &lab) in gl.data_mut().chunks_mut(k).zip(labels) {
                        row[lab] -= T::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    acc(*logits, gl);
                }
                Op::Mse { pred, target } => {
                    let pv = val(*pred);
                    let scale = g.item() * T::lit(2.0) / T::from_usize_lossy(pv.numel());
                    let gp =
                        Tensor::from_fn(pv.shape(), |k| (pv.data()[k] - target.data()[k]) * scale);
                    acc(*pred, gp);
                }
                Op::WeightedSum { x, weights } => {
                    acc(*x, weights.scale(g.item()));
                }
                Op::Sum(x) => {
                    acc(*x, Tensor::full(val(*x).shape(), g.item()));
                }
            }
        }

        let mut out = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].param {
                let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
                out.insert(
                    Var {
                        tape: self.id,
                        idx: i,
                    },
                    g,
                );
            }
        }
        // parameters recorded after the loss cannot influence it
        for i in il + 1..self.nodes.len() {
            if self.nodes[i].param {
                out.insert(
                    Var {
                        tape: self.id,
                        idx: i,
                    },
                    Tensor::zeros(self.nodes[i].value.shape()),
                );
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
