//! Reverse-mode automatic differentiation over a flat node arena.
//!
//! Nodes are appended in evaluation order, so the arena index order is a
//! topological order and the backward sweep is a single reverse pass. Each
//! op stores the node ids of its inputs plus whatever the vector-Jacobian
//! product needs; values are kept for the same reason. Gradients accumulate
//! in arena order, which keeps backward results bitwise reproducible.

use crate::diffgraph::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Input or constant; nothing to propagate.
    Leaf,
    /// Identity in the forward pass, barrier in the backward pass.
    StopGradient,
    Add { a: NodeId, b: NodeId, bias: bool },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    SumAll { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    L2Normalize { a: NodeId, axis: usize },
    DotRows { a: NodeId, b: NodeId },
    Softmax { a: NodeId, axis: usize },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    MaskedAdd { base: NodeId, delta: NodeId, mask: Tensor },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, start: usize, end: usize, axis: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar root with respect to every reachable node.
/// Unreachable or non-differentiable nodes report `None`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable leaf: a tensor whose gradient we want.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf: data, labels, one-hot selectors.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Forward identity whose backward pass stops here.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let bias = self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b, bias }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.mul_elem(&self.nodes[b.0].value)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, Op::MulElem { a, b }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(factor);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.tanh();
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Tanh { a }, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.exp()?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Exp { a }, rg))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.log()?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Log { a }, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.sum_all();
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::SumAll { a }, rg)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.nodes[a.0].value.sum_axis(axis)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::SumAxis { a, axis }, rg))
    }

    pub fn l2_normalize(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.nodes[a.0].value.l2_normalize(axis)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::L2Normalize { a, axis }, rg))
    }

    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.dot_rows(&self.nodes[b.0].value)?;
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, Op::DotRows { a, b }, rg))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.nodes[a.0].value.softmax(axis)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Softmax { a, axis }, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.transpose()?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// `base + delta ⊙ mask` with the mask held fixed (not differentiated).
    pub fn masked_add(&mut self, base: NodeId, delta: NodeId, mask: Tensor) -> Result<NodeId> {
        let value = self.nodes[base.0]
            .value
            .masked_add(&self.nodes[delta.0].value, &mask)?;
        let rg = self.any_requires_grad(&[base, delta]);
        Ok(self.push(value, Op::MaskedAdd { base, delta, mask }, rg))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = self.any_requires_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, end: usize, axis: usize) -> Result<NodeId> {
        let value = self.nodes[a.0].value.slice(start, end, axis)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Slice { a, start, end, axis }, rg))
    }

    /// Reverse sweep from a scalar root. Gradient contributions land on each
    /// input in arena order, so repeated runs accumulate identically.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            self.apply_vjp(id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => *acc = acc.add(&contrib)?,
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }

    fn apply_vjp(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf | Op::StopGradient => Ok(()),
            Op::Add { a, b, bias } => {
                self.accumulate(grads, *a, g.clone())?;
                let gb = if *bias { g.sum_axis(0)? } else { g.clone() };
                self.accumulate(grads, *b, gb)
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))
            }
            Op::MulElem { a, b } => {
                self.accumulate(grads, *a, g.mul_elem(&self.nodes[b.0].value)?)?;
                self.accumulate(grads, *b, g.mul_elem(&self.nodes[a.0].value)?)
            }
            Op::MatMul { a, b } => {
                let bt = self.nodes[b.0].value.transpose()?;
                self.accumulate(grads, *a, g.matmul(&bt)?)?;
                let at = self.nodes[a.0].value.transpose()?;
                self.accumulate(grads, *b, at.matmul(g)?)
            }
            Op::Scale { a, factor } => self.accumulate(grads, *a, g.scale(*factor)),
            Op::Tanh { a } => {
                let y = &self.nodes[id].value;
                let contrib = Tensor::from_fn(y.shape(), |i| {
                    g.data()[i] * (1.0 - y.data()[i] * y.data()[i])
                });
                self.accumulate(grads, *a, contrib)
            }
            Op::Exp { a } => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *a, g.mul_elem(y)?)
            }
            Op::Log { a } => {
                let x = &self.nodes[a.0].value;
                let contrib = Tensor::from_fn(x.shape(), |i| g.data()[i] / x.data()[i]);
                self.accumulate(grads, *a, contrib)
            }
            Op::SumAll { a } => {
                let x = &self.nodes[a.0].value;
                self.accumulate(grads, *a, Tensor::filled(x.shape(), g.item()))
            }
            Op::SumAxis { a, axis } => {
                let x = &self.nodes[a.0].value;
                let contrib = match (x.shape(), *axis) {
                    ([_], 0) => Tensor::filled(x.shape(), g.item()),
                    ([r, c], 0) => {
                        let (r, c) = (*r, *c);
                        Tensor::from_fn(&[r, c], |i| g.data()[i % c])
                    }
                    ([r, c], 1) => {
                        let (r, c) = (*r, *c);
                        Tensor::from_fn(&[r, c], |i| g.data()[i / c])
                    }
                    _ => unreachable!("sum_axis validated on the forward pass"),
                };
                self.accumulate(grads, *a, contrib)
            }
            Op::L2Normalize { a, axis } => {
                // Per lane, with y = x/‖x‖: dx = (g − y·(g·y)) / ‖x‖.
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[id].value;
                let (lanes, len) = lane_split(x.shape(), *axis);
                let mut data = vec![0.0; x.len()];
                for l in 0..lanes {
                    let xs = &x.data()[l * len..(l + 1) * len];
                    let ys = &y.data()[l * len..(l + 1) * len];
                    let gs = &g.data()[l * len..(l + 1) * len];
                    let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gy: f64 = gs.iter().zip(ys).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..len {
                        data[l * len + j] = (gs[j] - ys[j] * gy) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?)
            }
            Op::DotRows { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let c = av.shape()[1];
                let ga = Tensor::from_fn(av.shape(), |i| g.data()[i / c] * bv.data()[i]);
                let gb = Tensor::from_fn(av.shape(), |i| g.data()[i / c] * av.data()[i]);
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)
            }
            Op::Softmax { a, axis } => {
                // Per lane: dx = y ⊙ (g − Σ g⊙y).
                let y = &self.nodes[id].value;
                let (lanes, len) = lane_split(y.shape(), *axis);
                let mut data = vec![0.0; y.len()];
                for l in 0..lanes {
                    let ys = &y.data()[l * len..(l + 1) * len];
                    let gs = &g.data()[l * len..(l + 1) * len];
                    let gy: f64 = gs.iter().zip(ys).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..len {
                        data[l * len + j] = ys[j] * (gs[j] - gy);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data)?)
            }
            Op::Transpose { a } => self.accumulate(grads, *a, g.transpose()?),
            Op::Reshape { a } => {
                let x = &self.nodes[a.0].value;
                self.accumulate(grads, *a, g.reshape(x.shape())?)
            }
            Op::MaskedAdd { base, delta, mask } => {
                self.accumulate(grads, *base, g.clone())?;
                self.accumulate(grads, *delta, g.mul_elem(mask)?)
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let extent = self.nodes[p.0].value.shape()[*axis];
                    let piece = g.slice(offset, offset + extent, *axis)?;
                    self.accumulate(grads, *p, piece)?;
                    offset += extent;
                }
                Ok(())
            }
            Op::Slice { a, start, end, axis } => {
                let x = &self.nodes[a.0].value;
                let mut contrib = Tensor::zeros(x.shape());
                scatter_slice(&mut contrib, g, *start, *end, *axis);
                self.accumulate(grads, *a, contrib)
            }
        }
    }
}

fn lane_split(shape: &[usize], axis: usize) -> (usize, usize) {
    match (shape, axis) {
        ([n], 0) => (1, *n),
        ([r, c], 1) => (*r, *c),
        _ => unreachable!("lane ops validated on the forward pass"),
    }
}

/// Add `g` into the `start..end` region of `dst` along `axis`.
fn scatter_slice(dst: &mut Tensor, g: &Tensor, start: usize, end: usize, axis: usize) {
    let shape = dst.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis] * inner;
    let take = (end - start) * inner;
    for o in 0..outer {
        let base = o * full + start * inner;
        let dst_region = &mut dst.data_mut()[base..base + take];
        let src_region = &g.data()[o * take..(o + 1) * take];
        for (d, s) in dst_region.iter_mut().zip(src_region) {
            *d += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarRoot { .. }));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_x_squared_is_two_x() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul_elem(x, x).unwrap();
        let s = g.sum_all(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn stop_gradient_blocks_propagation() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[3.0, 4.0]));
        let frozen = g.stop_gradient(x);
        let prod = g.mul_elem(x, frozen).unwrap();
        let s = g.sum_all(prod);
        let grads = g.backward(s).unwrap();
        // d/dx of x * stop(x) is stop(x), not 2x.
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn constants_collect_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 7.0]));
        let prod = g.mul_elem(x, c).unwrap();
        let s = g.sum_all(prod);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 7.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn unreached_nodes_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[2.0]));
        let dead = g.scale(x, 10.0);
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(dead).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_twice_is_bitwise_identical() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[0.3, -1.2, 0.7, 2.0, -0.1, 0.9]));
        let h = g.tanh(x);
        let sm = g.softmax(h, 1).unwrap();
        let lg = g.log(sm).unwrap();
        let s = g.sum_all(lg);
        let g1 = g.backward(s).unwrap();
        let g2 = g.backward(s).unwrap();
        assert!(g1.get(x).unwrap().bit_eq(g2.get(x).unwrap()));
    }
}
