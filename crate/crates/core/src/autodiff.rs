//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records each primitive as it is applied. Nodes are appended in
//! evaluation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves are either *variables*, which receive gradients, or *constants*,
//! which do not. Work for constant branches is skipped entirely, so an attack
//! that only needs the input gradient does not pay for weight gradients.
//!
//! ```
//! use advdev::autodiff::Tape;
//! use advdev::Tensor;
//!
//! let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
//! let b = Tensor::vector(vec![1.0]).unwrap();
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::vector(vec![2.0, 3.0]).unwrap());
//! let w = tape.constant_ref(&w);
//! let b = tape.constant_ref(&b);
//! let y = tape.dense(x, w, b).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y).data(), &[6.0]);
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
//! ```

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
        /// Unfolded input patches, kept only when the weights need a gradient.
        cols: Option<Vec<f64>>,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    Margin {
        logits: NodeId,
        /// `(label, rival)` when the margin is above its floor, else `None`.
        active: Option<(usize, usize)>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar root with respect to every variable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; `None` for constants and untracked nodes.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn variable_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn conv2d(&mut self, input: NodeId, weights: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (out, cols, geometry) =
            ops::conv2d_with_cols(self.value(input), self.value(weights), self.value(bias), stride, pad)?;
        let cols = self.tracked(weights).then_some(cols);
        let tracked = self.tracked(input) || self.tracked(weights) || self.tracked(bias);
        Ok(self.push(
            Cow::Owned(out),
            Op::Conv2d {
                input,
                weights,
                bias,
                geometry,
                cols,
            },
            tracked,
        ))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::dense(self.value(input), self.value(weights), self.value(bias))?;
        let tracked = self.tracked(input) || self.tracked(weights) || self.tracked(bias);
        Ok(self.push(Cow::Owned(out), Op::Dense { input, weights, bias }, tracked))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).relu();
        let tracked = self.tracked(input);
        self.push(Cow::Owned(out), Op::Relu(input), tracked)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), tracked))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.value(input))?;
        let tracked = self.tracked(input);
        Ok(self.push(Cow::Owned(out), Op::GlobalAvgPool(input), tracked))
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let out = ops::softmax(self.value(input));
        let tracked = self.tracked(input);
        self.push(Cow::Owned(out), Op::Softmax(input), tracked)
    }

    /// Softmax cross-entropy of `logits` against `label`, as a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let loss = ops::cross_entropy(self.value(logits), label)?;
        let probs = ops::softmax(self.value(logits)).into_data();
        let tracked = self.tracked(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)?),
            Op::CrossEntropy { logits, label, probs },
            tracked,
        ))
    }

    /// Untargeted margin `max(Z_y - max_{i != y} Z_i, -kappa)` as a scalar node.
    pub fn margin(&mut self, logits: NodeId, label: usize, kappa: f64) -> Result<NodeId> {
        let (value, rival) = ops::margin(self.value(logits), label, kappa)?;
        let z = self.value(logits).data();
        let active = (z[label] - z[rival] > -kappa).then_some((label, rival));
        let tracked = self.tracked(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(value)?),
            Op::Margin { logits, active },
            tracked,
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(input).sum())?;
        let tracked = self.tracked(input);
        Ok(self.push(Cow::Owned(out), Op::Sum(input), tracked))
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Every variable leaf gets a gradient, zero-filled when the root does
    /// not depend on it.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.tracked => {
                    let shape = node.value.shape().to_vec();
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    let t = Tensor::from_parts(shape, data);
                    t.check_finite("backward").map(|_| Some(t))
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut accumulate = |id: NodeId, delta: Vec<f64>| {
            if !self.tracked(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                geometry,
                cols,
            } => {
                if self.tracked(*input) {
                    let dx = ops::conv2d_input_grad(g, self.value(*weights).data(), geometry);
                    accumulate(*input, dx);
                }
                if self.tracked(*weights) || self.tracked(*bias) {
                    let cols = match cols {
                        Some(c) => Cow::Borrowed(c),
                        None => Cow::Owned(ops::im2col(self.value(*input).data(), geometry)),
                    };
                    let (dw, db) = ops::conv2d_param_grads(g, &cols, geometry);
                    accumulate(*weights, dw);
                    accumulate(*bias, db);
                }
            }
            Op::Dense { input, weights, bias } => {
                let w = self.value(*weights);
                let n = w.shape()[1];
                if self.tracked(*input) {
                    let mut dx = vec![0.0; n];
                    for (row, &gi) in w.data().chunks_exact(n).zip(g) {
                        dx.iter_mut().zip(row).for_each(|(d, wv)| *d += gi * wv);
                    }
                    accumulate(*input, dx);
                }
                if self.tracked(*weights) {
                    let x = self.value(*input).data();
                    let dw = g.iter().flat_map(|&gi| x.iter().map(move |xv| gi * xv)).collect();
                    accumulate(*weights, dw);
                }
                accumulate(*bias, g.to_vec());
            }
            Op::Relu(input) => {
                // subgradient at exactly zero is zero
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| if y > 0.0 { gi } else { 0.0 })
                    .collect();
                accumulate(*input, dx);
            }
            Op::Add(a, b) => {
                accumulate(*a, g.to_vec());
                accumulate(*b, g.to_vec());
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape();
                let area = shape[1] * shape[2];
                let scale = 1.0 / area as f64;
                let dx = g.iter().flat_map(|&gc| std::iter::repeat(gc * scale).take(area)).collect();
                accumulate(*input, dx);
            }
            Op::Softmax(input) => {
                let p = node.value.data();
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                let dz = p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect();
                accumulate(*input, dz);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut dz: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                dz[*label] -= g[0];
                accumulate(*logits, dz);
            }
            Op::Margin { logits, active, .. } => {
                let mut dz = vec![0.0; self.value(*logits).len()];
                if let Some((label, rival)) = active {
                    dz[*label] = g[0];
                    dz[*rival] = -g[0];
                }
                accumulate(*logits, dz);
            }
            Op::Sum(input) => {
                accumulate(*input, vec![g[0]; self.value(*input).len()]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn relu_gradient_at_negative_and_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(v(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_dense_passes_gradient_through() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let x = tape.variable(v(&[0.3, -0.7]));
        let w = tape.constant_ref(&w);
        let b = tape.constant_ref(&b);
        let y = tape.dense(x, w, b).unwrap();
        let ce = tape.cross_entropy(y, 1).unwrap();
        let g = tape.backward(ce).unwrap();
        let p = ops::softmax(&v(&[0.3, -0.7]));
        let expected = [p.data()[0], p.data()[1] - 1.0];
        for (a, b) in g.get(x).unwrap().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(g.get(w).is_none());
    }

    #[test]
    fn dense_input_gradient_is_column_sums() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let x = tape.variable(v(&[1.0, 1.0, 1.0]));
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.dense(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-3.0, 7.0, 3.5]);
    }

    #[test]
    fn add_distributes_gradient_to_both_addends() {
        let mut tape = Tape::new();
        let a = tape.variable(v(&[1.0, 2.0]));
        let b = tape.variable(v(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        let d = tape.add(c, a).unwrap();
        let s = tape.sum(d).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn pool_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::filled(&[2, 3, 4], 0.7));
        let p = tape.global_avg_pool(x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&d| d == 1.0 / 12.0));
    }

    #[test]
    fn margin_gradient_selects_label_and_rival() {
        let mut tape = Tape::new();
        let z = tape.variable(v(&[2.0, 1.0, 0.0]));
        let m = tape.margin(z, 0, 0.0).unwrap();
        assert_eq!(tape.value(m).item(), 1.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[1.0, -1.0, 0.0]);

        let mut tape = Tape::new();
        let z = tape.variable(v(&[0.0, 3.0]));
        let m = tape.margin(z, 0, 0.0).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(v(&[1.0, 2.0]));
        let r = tape.relu(x);
        assert!(tape.backward(r).is_err());
    }

    #[test]
    fn unreachable_variable_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(v(&[1.0, 2.0]));
        let unused = tape.variable(v(&[5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
    }
}
