//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor that takes part in one computation. Each
//! operation appends a node holding its output and whatever the backward
//! pass needs (im2col buffers, pooling winners). [`Graph::backward`] walks
//! the tape in reverse and adds gradients into every leaf created with
//! `requires_grad`; calling it twice without [`Graph::zero_grad`]
//! accumulates, as in most frameworks.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, PoolGeom, LOG_EPSILON};
use super::ops;
use super::{Padding, Reduction, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        n: usize,
        m: usize,
    },
    Relu {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Softmax {
        input: Var,
        tau: f64,
        width: usize,
    },
    CrossEntropy {
        predicted: Var,
        target: Vec<f64>,
        scale: f64,
    },
    SquaredError {
        predicted: Var,
        target: Vec<f64>,
        scale: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether
    /// [`Graph::backward`] fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.check(v).expect("foreign var");
        self.nodes[v.index].value.take_grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn node(&self, v: Var) -> &Node {
        self.check(v).expect("var from another graph");
        &self.nodes[v.index]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::State(format!(
                "var {v:?} does not belong to graph {}",
                self.id
            )));
        }
        Ok(())
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.index].value.requires_grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push(value, op))
    }

    fn checked(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| self.check(v))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        self.checked(&[input, kernels, bias])?;
        let (x, k, b) = (self.value(input), self.value(kernels), self.value(bias));
        let geom = ConvGeom::new(x.shape(), k.shape(), b.shape(), stride, padding)?;
        let (out, cols) = kernels::conv2d_forward(x.data(), k.data(), b.data(), &geom);
        let shape = ops::conv_shape(x.rank(), &geom);
        let op = Op::Conv2d {
            input,
            kernels,
            bias,
            geom,
            cols,
        };
        self.push_op(shape, out, op, &[input, kernels, bias])
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let geom = PoolGeom::new(x.shape(), k, stride)?;
        let (out, argmax) = kernels::maxpool_forward(x.data(), &geom);
        let shape = ops::pool_shape(x.rank(), &geom);
        self.push_op(shape, out, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.checked(&[input, weight, bias])?;
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (rows, n, m) = ops::dense_dims(x, w, b)?;
        let out = kernels::dense_forward(x.data(), w.data(), b.data(), rows, n);
        let shape = ops::dense_shape(x.rank(), rows, m);
        let op = Op::Dense {
            input,
            weight,
            bias,
            rows,
            n,
            m,
        };
        self.push_op(shape, out, op, &[input, weight, bias])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = x.shape().to_vec();
        self.push_op(shape, out, Op::Relu { input }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(input)?;
        let shape = shape.into();
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                x.shape()
            )));
        }
        let data = x.data().to_vec();
        self.push_op(shape, data, Op::Reshape { input }, &[input])
    }

    pub fn softmax_t(&mut self, input: Var, tau: f64) -> Result<Var> {
        self.check(input)?;
        let p = ops::softmax_t(self.value(input), tau)?;
        let width = p.row_width();
        let shape = p.shape().to_vec();
        self.push_op(shape, p.into_data(), Op::Softmax { input, tau, width }, &[input])
    }

    /// Cross-entropy of `predicted` (a recorded probability tensor) against a
    /// constant target distribution.
    pub fn cross_entropy(&mut self, target: &Tensor, predicted: Var, reduction: Reduction) -> Result<Var> {
        self.check(predicted)?;
        let p = self.value(predicted);
        let k = ops::check_pair(target, p, "cross_entropy")?;
        kernels::check_probability_rows(target.data(), k, "cross_entropy target")?;
        kernels::check_probability_rows(p.data(), k, "cross_entropy prediction")?;
        let per_row = kernels::cross_entropy_rows(target.data(), p.data(), k);
        let loss = kernels::reduce(&per_row, reduction);
        let scale = reduction_scale(reduction, per_row.len());
        let op = Op::CrossEntropy {
            predicted,
            target: target.data().to_vec(),
            scale,
        };
        self.push_op(Vec::new(), vec![loss], op, &[predicted])
    }

    /// Sum of squared differences per row, reduced over rows.
    pub fn squared_error(&mut self, target: &Tensor, predicted: Var, reduction: Reduction) -> Result<Var> {
        self.check(predicted)?;
        let p = self.value(predicted);
        let k = ops::check_pair(target, p, "squared_error")?;
        let rows = p.len() / k;
        let sum: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let scale = reduction_scale(reduction, rows);
        let op = Op::SquaredError {
            predicted,
            target: target.data().to_vec(),
            scale,
        };
        self.push_op(Vec::new(), vec![sum * scale], op, &[predicted])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.checked(&[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.push_op(shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.checked(&[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        self.push_op(shape, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let out = x.data().iter().map(|v| v * factor).collect();
        let shape = x.shape().to_vec();
        self.push_op(shape, out, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let total = self.value(input).data().iter().sum();
        self.push_op(Vec::new(), vec![total], Op::Sum { input }, &[input])
    }

    /// Back-propagates from a scalar `loss` and adds the result into the
    /// gradient slot of every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let root = &self.nodes[loss.index];
        if matches!(root.op, Op::Leaf) {
            return Err(Error::State(
                "backward called on a leaf; no recorded computation".into(),
            ));
        }
        if !root.value.requires_grad() {
            return Err(Error::State(
                "backward called on a value that depends on no requires_grad leaf".into(),
            ));
        }
        if root.value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        adjoints[loss.index] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for i in (0..=loss.index).rev() {
            let Some(grad) = adjoints[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            self.propagate(node, grad, &mut adjoints, &mut leaf_grads, i);
        }

        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node,
        grad: Vec<f64>,
        adj: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
        index: usize,
    ) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.index].value.requires_grad();
        let add_to = |adj: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            let slot = adj[v.index].get_or_insert_with(|| vec![0.0; nodes[v.index].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => leaf_grads.push((index, grad)),
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            } => {
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                if wants(*kernels) {
                    add_to(adj, *kernels, &|dk| {
                        kernels::gemm(patch, rows, cout, cols, true, &grad, false, 1.0, dk)
                    });
                }
                if wants(*bias) {
                    add_to(adj, *bias, &|db| kernels::add_column_sums(&grad, cout, db));
                }
                if wants(*input) {
                    let k = nodes[kernels.index].value.data();
                    let mut dcols = vec![0.0; rows * patch];
                    kernels::gemm(rows, cout, patch, &grad, false, k, true, 0.0, &mut dcols);
                    add_to(adj, *input, &|dx| kernels::col2im_add(&dcols, geom, dx));
                }
            }
            Op::MaxPool { input, argmax } => {
                add_to(adj, *input, &|dx| {
                    for (&src, &g) in argmax.iter().zip(&grad) {
                        dx[src] += g;
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                n,
                m,
            } => {
                let (rows, n, m) = (*rows, *n, *m);
                if wants(*weight) {
                    let x = nodes[input.index].value.data();
                    add_to(adj, *weight, &|dw| kernels::gemm(n, rows, m, x, true, &grad, false, 1.0, dw));
                }
                if wants(*bias) {
                    add_to(adj, *bias, &|db| kernels::add_column_sums(&grad, m, db));
                }
                if wants(*input) {
                    let w = nodes[weight.index].value.data();
                    add_to(adj, *input, &|dx| kernels::gemm(rows, m, n, &grad, false, w, true, 1.0, dx));
                }
            }
            Op::Relu { input } => {
                let y = node.value.data();
                add_to(adj, *input, &|dx| {
                    for ((d, &g), &out) in dx.iter_mut().zip(&grad).zip(y) {
                        if out > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Reshape { input } => {
                add_to(adj, *input, &|dx| dx.iter_mut().zip(&grad).for_each(|(d, g)| *d += g));
            }
            Op::Softmax { input, tau, width } => {
                let p = node.value.data();
                add_to(adj, *input, &|dx| {
                    for ((d, g), p) in dx
                        .chunks_exact_mut(*width)
                        .zip(grad.chunks_exact(*width))
                        .zip(p.chunks_exact(*width))
                    {
                        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                        for ((d, &g), &p) in d.iter_mut().zip(g).zip(p) {
                            *d += p * (g - dot) / tau;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                predicted,
                target,
                scale,
            } => {
                let p = nodes[predicted.index].value.data();
                let a = grad[0] * scale;
                add_to(adj, *predicted, &|dp| {
                    for ((d, &t), &p) in dp.iter_mut().zip(target).zip(p) {
                        if t != 0.0 {
                            *d -= a * t / (p + LOG_EPSILON);
                        }
                    }
                });
            }
            Op::SquaredError {
                predicted,
                target,
                scale,
            } => {
                let p = nodes[predicted.index].value.data();
                let a = grad[0] * scale;
                add_to(adj, *predicted, &|dp| {
                    for ((d, &t), &p) in dp.iter_mut().zip(target).zip(p) {
                        *d += 2.0 * a * (p - t);
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_to(adj, v, &|dx| dx.iter_mut().zip(&grad).for_each(|(d, g)| *d += g));
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let o = nodes[other.index].value.data();
                        add_to(adj, v, &|dx| {
                            for ((d, g), o) in dx.iter_mut().zip(&grad).zip(o) {
                                *d += g * o;
                            }
                        });
                    }
                }
            }
            Op::Scale { input, factor } => {
                add_to(adj, *input, &|dx| {
                    dx.iter_mut().zip(&grad).for_each(|(d, g)| *d += g * factor)
                });
            }
            Op::Sum { input } => {
                let g = grad[0];
                add_to(adj, *input, &|dx| dx.iter_mut().for_each(|d| *d += g));
            }
        }
    }
}

fn reduction_scale(reduction: Reduction, rows: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / rows as f64,
    }
}
