//! Eager reverse-mode tape.
//!
//! Operations execute immediately (dispatching into [`super::ops`]) and
//! append one node to the tape; `backward` walks the nodes in reverse
//! creation order. The graph is acyclic by construction and executes in
//! definition order — there is no scheduler or fusion.

use super::{ops, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize },
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    AvgPool2d { input: NodeId, k: usize, stride: usize },
    AdaptiveAvgPool2d { input: NodeId },
    Relu { input: NodeId },
    Linear { input: NodeId, weight: NodeId },
    Affine { input: NodeId, weight: NodeId, bias: NodeId },
    BiasAdd { input: NodeId, bias: NodeId },
    Reshape { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Sum { input: NodeId },
    Dropout { input: NodeId, mask: Vec<T> },
    CropWindows { input: NodeId, starts: Vec<Option<(usize, usize)>> },
    SpatialSoftmaxLoss { logits: NodeId, labels: Vec<Vec<u32>>, softmax: Tensor<T> },
    SoftmaxXent { scores: NodeId, labels: Vec<usize>, softmax: Tensor<T> },
    Consumed,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode autodiff tape over [`Tensor`] values.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>, what: &str) -> Result<NodeId> {
        value.assert_finite(what)?;
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf that does not accumulate a gradient (images, fixed data).
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, false, Op::Leaf, "input")
    }

    /// Leaf that accumulates a gradient (trainable weights).
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, true, Op::Leaf, "param")
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let out = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        )?;
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        self.push(out, rg, Op::Conv2d { input, weight, bias, stride, pad }, "conv2d")
    }

    pub fn maxpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input), k, stride)?;
        let rg = self.requires(input);
        self.push(out, rg, Op::MaxPool2d { input, argmax }, "maxpool2d")
    }

    pub fn avgpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let out = ops::avgpool2d_forward(self.value(input), k, stride)?;
        let rg = self.requires(input);
        self.push(out, rg, Op::AvgPool2d { input, k, stride }, "avgpool2d")
    }

    pub fn adaptive_avgpool2d(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let out = ops::adaptive_avgpool2d_forward(self.value(input), out_h, out_w)?;
        let rg = self.requires(input);
        self.push(out, rg, Op::AdaptiveAvgPool2d { input }, "adaptive_avgpool2d")
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::relu_forward(self.value(input));
        let rg = self.requires(input);
        self.push(out, rg, Op::Relu { input }, "relu")
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let out = ops::linear_forward(self.value(input), self.value(weight))?;
        let rg = self.requires(input) || self.requires(weight);
        self.push(out, rg, Op::Linear { input, weight }, "linear")
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::affine_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        self.push(out, rg, Op::Affine { input, weight, bias }, "affine")
    }

    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 || self.value(bias).shape() != [shape[1]] {
            return Err(Error::Dim(format!(
                "bias_add expects [N,E] + [E], got {:?} + {:?}",
                shape,
                self.value(bias).shape()
            )));
        }
        let (n, e) = (shape[0], shape[1]);
        let out = Tensor::from_fn(&shape, |i| {
            self.value(input).data()[i] + self.value(bias).data()[i % e]
        });
        debug_assert_eq!(n * e, out.len());
        let rg = self.requires(input) || self.requires(bias);
        self.push(out, rg, Op::BiasAdd { input, bias }, "bias_add")
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(input).reshaped(shape)?;
        let rg = self.requires(input);
        self.push(out, rg, Op::Reshape { input }, "reshape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add_forward(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::Add { a, b }, "add")
    }

    /// Inverted dropout with a caller-supplied keep mask already scaled by
    /// `1/(1-p)`; the caller owns the RNG so runs stay reproducible.
    pub fn dropout(&mut self, input: NodeId, mask: Vec<T>) -> Result<NodeId> {
        if mask.len() != self.value(input).len() {
            return Err(Error::Dim("dropout mask length mismatch".into()));
        }
        let out = Tensor::from_fn(self.value(input).shape(), |i| {
            self.value(input).data()[i] * mask[i]
        });
        let rg = self.requires(input);
        self.push(out, rg, Op::Dropout { input, mask }, "dropout")
    }

    pub fn crop_windows(
        &mut self,
        input: NodeId,
        starts: Vec<Option<(usize, usize)>>,
        crop: usize,
    ) -> Result<NodeId> {
        let out = ops::crop_windows_forward(self.value(input), &starts, crop)?;
        let rg = self.requires(input);
        self.push(out, rg, Op::CropWindows { input, starts }, "crop_windows")
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total = ops::sum_all(self.value(input));
        let rg = self.requires(input);
        self.push(Tensor::scalar(total), rg, Op::Sum { input }, "sum")
    }

    /// Dense spatial softmax loss over `[N,C,H,W]` logits, one label grid per
    /// sample; per-sample losses sum over positions and average over the batch.
    pub fn spatial_softmax_loss(&mut self, logits: NodeId, labels: Vec<Vec<u32>>) -> Result<NodeId> {
        let refs: Vec<&[u32]> = labels.iter().map(|g| g.as_slice()).collect();
        let (loss, softmax) = ops::spatial_softmax_loss_forward(self.value(logits), &refs)?;
        let rg = self.requires(logits);
        self.push(
            Tensor::scalar(loss),
            rg,
            Op::SpatialSoftmaxLoss { logits, labels, softmax },
            "spatial_softmax_loss",
        )
    }

    /// Mean cross-entropy over `[N,K]` class scores.
    pub fn softmax_xent(&mut self, scores: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let (loss, softmax) = ops::softmax_xent_forward(self.value(scores), &labels)?;
        let rg = self.requires(scores);
        self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxXent { scores, labels, softmax },
            "softmax_xent",
        )
    }

    fn accumulate(&mut self, id: NodeId, grad: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return Ok(());
        }
        if grad.shape() != node.value.shape() {
            return Err(Error::Internal(format!(
                "gradient shape {:?} does not match value shape {:?}",
                grad.shape(),
                node.value.shape()
            )));
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, &g) in acc.iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            None => node.grad = Some(grad.into_data()),
        }
        Ok(())
    }

    /// Reverse pass from a scalar node. May be called once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Internal("backward already run on this tape".into()));
        }
        self.backward_done = true;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Dim(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Consumed);
            let grad_out = Tensor::new(
                self.nodes[i].value.shape(),
                self.nodes[i].grad.clone().expect("grad present"),
            )?;
            match op {
                Op::Leaf | Op::Consumed => {}
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    if self.requires(input) {
                        let d = ops::conv2d_backward_input(
                            self.value(weight),
                            &grad_out,
                            &self.value(input).shape().to_vec(),
                            stride,
                            pad,
                        )?;
                        self.accumulate(input, d)?;
                    }
                    if self.requires(weight) || self.requires(bias) {
                        let (dw, db) = ops::conv2d_backward_params(
                            self.value(input),
                            &self.value(weight).shape().to_vec(),
                            &grad_out,
                            stride,
                            pad,
                        )?;
                        self.accumulate(weight, dw)?;
                        self.accumulate(bias, db)?;
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    let d = ops::maxpool2d_backward(
                        &self.value(input).shape().to_vec(),
                        &argmax,
                        &grad_out,
                    )?;
                    self.accumulate(input, d)?;
                }
                Op::AvgPool2d { input, k, stride } => {
                    let d = ops::avgpool2d_backward(
                        &self.value(input).shape().to_vec(),
                        k,
                        stride,
                        &grad_out,
                    )?;
                    self.accumulate(input, d)?;
                }
                Op::AdaptiveAvgPool2d { input } => {
                    let d = ops::adaptive_avgpool2d_backward(
                        &self.value(input).shape().to_vec(),
                        &grad_out,
                    )?;
                    self.accumulate(input, d)?;
                }
                Op::Relu { input } => {
                    let d = ops::relu_backward(self.value(input), &grad_out);
                    self.accumulate(input, d)?;
                }
                Op::Linear { input, weight } => {
                    let (dx, dw) = ops::linear_backward(self.value(input), self.value(weight), &grad_out)?;
                    self.accumulate(input, dx)?;
                    self.accumulate(weight, dw)?;
                }
                Op::Affine { input, weight, bias } => {
                    let (dx, dw) = ops::linear_backward(self.value(input), self.value(weight), &grad_out)?;
                    let db = ops::bias_backward(&grad_out);
                    self.accumulate(input, dx)?;
                    self.accumulate(weight, dw)?;
                    self.accumulate(bias, db)?;
                }
                Op::BiasAdd { input, bias } => {
                    let db = ops::bias_backward(&grad_out);
                    self.accumulate(input, grad_out.clone())?;
                    self.accumulate(bias, db)?;
                }
                Op::Reshape { input } => {
                    let d = grad_out.reshaped(&self.value(input).shape().to_vec())?;
                    self.accumulate(input, d)?;
                }
                Op::Add { a, b } => {
                    self.accumulate(a, grad_out.clone())?;
                    self.accumulate(b, grad_out)?;
                }
                Op::Sum { input } => {
                    let g = grad_out.data()[0];
                    let d = Tensor::full(self.value(input).shape(), g);
                    self.accumulate(input, d)?;
                }
                Op::Dropout { input, mask } => {
                    let d = Tensor::from_fn(grad_out.shape(), |i| grad_out.data()[i] * mask[i]);
                    self.accumulate(input, d)?;
                }
                Op::CropWindows { input, starts } => {
                    let ishape = self.value(input).shape().to_vec();
                    let d = ops::crop_windows_backward(&grad_out, &starts, ishape[2], ishape[3])?;
                    self.accumulate(input, d)?;
                }
                Op::SpatialSoftmaxLoss { logits, labels, softmax } => {
                    let refs: Vec<&[u32]> = labels.iter().map(|g| g.as_slice()).collect();
                    let d = ops::spatial_softmax_loss_backward(&softmax, &refs, grad_out.data()[0]);
                    self.accumulate(logits, d)?;
                }
                Op::SoftmaxXent { scores, labels, softmax } => {
                    let d = ops::softmax_xent_backward(&softmax, &labels, grad_out.data()[0]);
                    self.accumulate(scores, d)?;
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(grad) = &node.grad {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_runs_once() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[2, 2], 1.5)).unwrap();
        let y = tape.relu(x).unwrap();
        let flat = tape.reshape(y, &[1, 4]).unwrap();
        let w = tape.param(Tensor::full(&[4, 1], 1.0)).unwrap();
        let s = tape.linear(flat, w).unwrap();
        let loss = tape.softmax_xent(s, vec![0]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn add_fans_gradient_out() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::full(&[1, 3], 2.0)).unwrap();
        let b = tape.param(Tensor::full(&[1, 3], 3.0)).unwrap();
        let s = tape.add(a, b).unwrap();
        let w = tape.input(Tensor::full(&[3, 1], 1.0)).unwrap();
        let out = tape.linear(s, w).unwrap();
        let loss = tape.softmax_xent(out, vec![0]).unwrap();
        tape.backward(loss).unwrap();
        // single class: softmax == 1, gradient identically zero
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn nan_in_forward_is_hard_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::full(&[1, 1], f32::MAX)).unwrap();
        let w = tape.param(Tensor::full(&[1, 1], f32::MAX)).unwrap();
        // overflow to +inf
        assert!(tape.linear(x, w).is_err());
    }
}
