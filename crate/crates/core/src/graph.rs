//! Reverse-mode differentiation over an append-only node list.
//!
//! Every node only refers to nodes created before it, so the node order is a
//! topological order and the graph cannot contain cycles. `backward` walks the
//! list once in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{conv, pool, upsample};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Identifies a trainable tensor across graph rebuilds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
pub(crate) enum Op {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: conv::Conv2dSpec,
    },
    ConvTranspose {
        input: Var,
        kernel: Var,
        geometry: upsample::TransposeGeometry,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Fuse {
        maps: Vec<Var>,
        weights: Var,
    },
    Sum(Var),
    Mul(Var, Var),
    LinearCombination(Vec<(Var, f64)>),
    BalancedBce {
        logits: Var,
        boundary: Arc<[bool]>,
        beta: f64,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    #[cfg(test)]
    pub(crate) fn insert_for_test(&mut self, id: ParamId, value: Tensor) {
        self.grads.insert(id, value);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&id, t)| (id, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant, false)
    }

    /// Registers a parameter. Registering the same id twice returns the
    /// existing node so gradients from all uses accumulate in one place.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_unchecked(value.clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a computed node, enforcing the finite-values invariant.
    pub(crate) fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self
            .op_inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Constant | Op::Param(_) => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::ConvTranspose { input, kernel, .. } => vec![*input, *kernel],
            Op::MaxPool2 { input, .. } => vec![*input],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Sum(x) => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::Fuse { maps, weights } => {
                let mut v = maps.clone();
                v.push(*weights);
                v
            }
            Op::Mul(a, b) => vec![*a, *b],
            Op::LinearCombination(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::BalancedBce { logits, .. } => vec![*logits],
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul operands differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `Σ cᵢ·xᵢ` over same-shaped operands.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::InvalidArgument("empty linear combination".into()));
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "linear combination operands differ: {:?} vs {:?}",
                    shape,
                    t.shape()
                )));
            }
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        self.push(
            out,
            Op::LinearCombination(terms.to_vec()),
            "linear_combination",
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.linear_combination(&[(x, c)])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear_combination(&[(a, 1.0), (b, 1.0)])
    }

    /// Gradients of a scalar `root` with respect to every registered parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_scaled(root, 1.0)
    }

    /// Like [`Graph::backward`] with the seed gradient `d root = upstream`.
    pub fn backward_scaled(&self, root: Var, upstream: f64) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("root {root:?} is not in this graph")));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), upstream));

        let mut out = Gradients::default();
        for (&id, &v) in &self.params {
            out.grads.insert(id, Tensor::zeros(self.value(v).shape()));
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                out.grads
                    .get_mut(id)
                    .expect("registered parameter")
                    .add_assign(&g);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                if self.requires_grad(*input) {
                    send(*input, conv::conv2d_backward_input(x.shape(), w, *spec, &g));
                }
                if self.requires_grad(*weight) {
                    send(
                        *weight,
                        conv::conv2d_backward_weight(x, w.shape(), *spec, &g),
                    );
                }
                if self.requires_grad(*bias) {
                    send(*bias, conv::conv2d_backward_bias(&g));
                }
            }
            Op::ConvTranspose {
                input,
                kernel,
                geometry,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                if self.requires_grad(*input) {
                    send(
                        *input,
                        upsample::transpose_backward_input(x.shape(), k, geometry, &g),
                    );
                }
                if self.requires_grad(*kernel) {
                    send(
                        *kernel,
                        upsample::transpose_backward_kernel(x, k.shape(), geometry, &g),
                    );
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let shape = self.value(*input).shape();
                send(*input, pool::maxpool2_backward(shape, argmax, &g));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                send(*x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yi, &gi)| gi * yi * (1.0 - yi))
                    .collect();
                send(*x, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        send(p, Tensor::new(shape, slice)?);
                    }
                    offset += n;
                }
            }
            Op::Fuse { maps, weights } => {
                let h = self.value(*weights).data().to_vec();
                let mut gh = vec![0.0; h.len()];
                for (n, &m) in maps.iter().enumerate() {
                    let mv = self.value(m);
                    gh[n] = mv.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    if self.requires_grad(m) {
                        send(m, g.map(|v| v * h[n]));
                    }
                }
                send(
                    *weights,
                    Tensor::new(self.value(*weights).shape().to_vec(), gh)?,
                );
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                send(*x, Tensor::full(shape, g.data()[0]));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = tb
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gi)| y * gi)
                    .collect();
                let gb = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gi)| x * gi)
                    .collect();
                send(*a, Tensor::new(ta.shape().to_vec(), ga)?);
                send(*b, Tensor::new(tb.shape().to_vec(), gb)?);
            }
            Op::LinearCombination(terms) => {
                for &(v, c) in terms {
                    send(v, g.map(|gi| gi * c));
                }
            }
            Op::BalancedBce {
                logits,
                boundary,
                beta,
            } => {
                let s = self.value(*logits);
                let up = g.data()[0];
                let data = s
                    .data()
                    .iter()
                    .zip(boundary.iter())
                    .map(|(&si, &is_b)| {
                        let p = crate::ops::pointwise::sigmoid_scalar(si);
                        if is_b {
                            up * beta * p
                        } else {
                            up * (1.0 - beta) * (p - 1.0)
                        }
                    })
                    .collect();
                send(*logits, Tensor::new(s.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    /// Forward values close to non-differentiable points, used by the
    /// gradient checker. Relu sites contribute their inputs; pooling windows
    /// contribute the gap between the winning element (as chosen in
    /// `reference`) and each other element of the window.
    pub(crate) fn kink_features(&self, reference: &Graph) -> Vec<f64> {
        let mut feats = Vec::new();
        for (node, ref_node) in self.nodes.iter().zip(&reference.nodes) {
            match (&node.op, &ref_node.op) {
                (Op::Relu(x), _) => feats.extend_from_slice(self.value(*x).data()),
                (Op::MaxPool2 { input, .. }, Op::MaxPool2 { argmax, .. }) => {
                    let xv = self.value(*input);
                    pool::window_gaps(xv, argmax, &mut feats);
                }
                _ => {}
            }
        }
        feats
    }
}
