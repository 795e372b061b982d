//! Reverse-mode tape over [`DenseMatrix`] values.
//!
//! Operations are appended in forward order and replayed in exact reverse
//! order by [`Tape::backward`]. Every node caches its forward value; losses
//! also cache whatever the backward rule needs (softmax probabilities, labels,
//! targets).

use super::matrix::{linear_forward, sign, DenseMatrix};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { input: Var, weight: Var },
    BiasAdd { input: Var, bias: Var },
    Relu { input: Var },
    SteSign { input: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: DenseMatrix },
    SigmoidBce { logits: Var, targets: DenseMatrix },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
    visited: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&DenseMatrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var) -> DenseMatrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    /// Non-leaf nodes in the order their backward rules ran.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

fn accumulate(slot: &mut Option<DenseMatrix>, delta: DenseMatrix) {
    match slot {
        Some(g) => {
            for (a, b) in g.values_mut().iter_mut().zip(delta.values()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &DenseMatrix {
        &self.nodes[var.0].value
    }

    /// Scalar value of a 1x1 node (the losses).
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.values()[0]
    }

    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `input[n x d] * weight[k x d]^T`.
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let out = linear_forward(self.value(input), self.value(weight))?;
        Ok(self.push(out, Op::Linear { input, weight }))
    }

    /// Adds a `1 x k` bias row to every row of `input`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::dim("bias_add", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.values()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::BiasAdd { input, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(out, Op::Relu { input })
    }

    /// Sign on the forward pass (`sign(0) = +1`); identity on the backward pass.
    pub fn ste_binarize(&mut self, input: Var) -> Var {
        let out = self.value(input).map(sign);
        self.push(out, Op::SteSign { input })
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::len("softmax_cross_entropy labels", z.rows(), labels.len()));
        }
        let n = z.rows();
        let mut probs = DenseMatrix::zeros(n, z.cols());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= z.cols() {
                return Err(Error::Index {
                    context: "softmax_cross_entropy label",
                    index: y,
                    bound: z.cols(),
                });
            }
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in probs.row_mut(i) {
                *p /= sum;
            }
            total += sum.ln() + max - row[y];
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let labels = labels.to_vec();
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            Op::SoftmaxCrossEntropy { logits, labels, probs },
        ))
    }

    /// Mean over all entries of the binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &DenseMatrix) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::dim("sigmoid_bce", z.shape(), targets.shape()));
        }
        if let Some(bad) = targets.values().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Validation(format!(
                "sigmoid_bce target {bad} is not 0 or 1"
            )));
        }
        let count = z.values().len();
        // max(z, 0) - z t + ln(1 + e^{-|z|})
        let total: f64 = z
            .values()
            .iter()
            .zip(targets.values())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            Op::SigmoidBce {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// Back-propagates from a 1x1 `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::dim("backward (loss must be scalar)", shape, (1, 1)));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));
        let mut visited = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                visited.push(Var(idx));
            }
            match &node.op {
                Op::Leaf => {}
                Op::Linear { input, weight } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let mut gx = DenseMatrix::zeros(x.rows(), x.cols());
                    let mut gw = DenseMatrix::zeros(w.rows(), w.cols());
                    for i in 0..x.rows() {
                        let xi = x.row(i);
                        let gi = upstream.row(i);
                        for (j, &g) in gi.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            for (a, &b) in gx.row_mut(i).iter_mut().zip(w.row(j)) {
                                *a += g * b;
                            }
                            for (a, &b) in gw.row_mut(j).iter_mut().zip(xi) {
                                *a += g * b;
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], gx);
                    accumulate(&mut grads[weight.0], gw);
                }
                Op::BiasAdd { input, bias } => {
                    let mut gb = DenseMatrix::zeros(1, upstream.cols());
                    for r in upstream.row_iter() {
                        for (a, b) in gb.values_mut().iter_mut().zip(r) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[input.0], upstream.clone());
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let mut g = upstream.clone();
                    for (gv, &xv) in g.values_mut().iter_mut().zip(x.values()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[input.0], g);
                }
                Op::SteSign { input } => {
                    accumulate(&mut grads[input.0], upstream.clone());
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let seed = upstream.values()[0];
                    let n = labels.len().max(1) as f64;
                    let mut g = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        let row = g.row_mut(i);
                        row[y] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= seed / n;
                        }
                    }
                    accumulate(&mut grads[logits.0], g);
                }
                Op::SigmoidBce { logits, targets } => {
                    let seed = upstream.values()[0];
                    let z = self.value(*logits);
                    let count = z.values().len().max(1) as f64;
                    let mut g = DenseMatrix::zeros(z.rows(), z.cols());
                    for ((gv, &zv), &t) in g
                        .values_mut()
                        .iter_mut()
                        .zip(z.values())
                        .zip(targets.values())
                    {
                        *gv = (sigmoid(zv) - t) * seed / count;
                    }
                    accumulate(&mut grads[logits.0], g);
                }
            }
            grads[idx] = Some(upstream);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
