use super::kernels::{self, Conv2dGeometry, PoolGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a custom rule sees when the tape is replayed.
pub struct BackwardContext<'a, T> {
    pub upstream: &'a [T],
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
}

/// A user-supplied vector-Jacobian product. It fully replaces any analytic
/// derivative for the node it is attached to.
pub trait BackwardRule<T>: Send {
    /// One entry per input, `None` where no gradient flows.
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>>;
}

impl<T, F> BackwardRule<T> for F
where
    F: Fn(&BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> + Send,
{
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        self(ctx)
    }
}

enum Op<T> {
    Affine {
        batch: usize,
        inputs: usize,
        outputs: usize,
    },
    Conv2d(Conv2dGeometry),
    MaxPool {
        argmax: Vec<u32>,
    },
    Relu,
    SoftmaxCrossEntropy {
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Sum,
    Add,
    Sub,
    Mul,
    Scale(T),
    LeakyIntegrate {
        beta: T,
    },
    Reset {
        threshold: T,
        detach: bool,
    },
    Stack,
    Rows {
        start: usize,
    },
    Reshape,
}

enum Rule<T> {
    Leaf,
    Builtin(Op<T>),
    Custom(Box<dyn BackwardRule<T>>),
}

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    parents: Vec<Var>,
    rule: Rule<T>,
}

/// The tape. Nodes are appended in evaluation order, so index order is a
/// topological order and backward replays it in reverse.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            grad: None,
            parents: Vec::new(),
            rule: Rule::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, parents: &[Var], rule: Rule<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let (parents, rule) = if requires_grad {
            (parents.to_vec(), rule)
        } else {
            (Vec::new(), Rule::Leaf)
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
            parents,
            rule,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// Records a node whose output was computed by the caller and whose
    /// gradient is given by `rule`.
    pub fn custom(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        rule: impl BackwardRule<T> + 'static,
    ) -> Result<Var> {
        self.push(op, output, inputs, Rule::Custom(Box::new(rule)))
    }

    /// `x[B×I]·w[I×O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (&[batch, inputs], &[wi, outputs]) = (xs, ws) else {
            return Err(Error::Dimension(format!(
                "affine expects 2-d x and w, got {xs:?}, {ws:?}"
            )));
        };
        if wi != inputs || bs != [outputs] {
            return Err(Error::Dimension(format!(
                "affine: x {xs:?}, w {ws:?}, b {bs:?} are incompatible"
            )));
        }
        let out = kernels::affine_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch,
            inputs,
            outputs,
        );
        let out = Tensor::new([batch, outputs], out)?;
        self.push(
            "affine",
            out,
            &[x, w, b],
            Rule::Builtin(Op::Affine { batch, inputs, outputs }),
        )
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = Conv2dGeometry::new(self.value(x).shape(), self.value(k).shape(), stride, padding)?;
        if self.value(b).shape() != [geo.filters] {
            return Err(Error::Dimension(format!(
                "conv2d bias must have {} entries, got {:?}",
                geo.filters,
                self.value(b).shape()
            )));
        }
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), self.value(b).data(), &geo);
        let out = Tensor::new(geo.output_shape(), out)?;
        self.push("conv2d", out, &[x, k, b], Rule::Builtin(Op::Conv2d(geo)))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let geo = PoolGeometry::new(&shape, window, stride)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), &geo);
        let mut out_shape = shape.clone();
        let nd = out_shape.len();
        out_shape[nd - 2] = geo.out_h;
        out_shape[nd - 1] = geo.out_w;
        let out = Tensor::new(out_shape, out)?;
        self.push("maxpool2d", out, &[x], Rule::Builtin(Op::MaxPool { argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, &[x], Rule::Builtin(Op::Relu))
    }

    /// Mean over the batch of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape();
        let &[rows, cols] = shape else {
            return Err(Error::Dimension(format!("logits must be 2-d, got {shape:?}")));
        };
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for a batch of {rows}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index(format!("target {t} outside [0, {cols})")));
        }
        let data = self.value(logits).data();
        let probs = kernels::softmax_rows(data, rows, cols);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - (row[t] - max);
        }
        let loss = Tensor::scalar(total / T::lit(rows as f64));
        self.push(
            "softmax_cross_entropy",
            loss,
            &[logits],
            Rule::Builtin(Op::SoftmaxCrossEntropy {
                probs,
                targets: targets.to_vec(),
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), &[x], Rule::Builtin(Op::Sum))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push("add", out, &[a, b], Rule::Builtin(Op::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push("sub", out, &[a, b], Rule::Builtin(Op::Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push("mul", out, &[a, b], Rule::Builtin(Op::Mul))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, &[a], Rule::Builtin(Op::Scale(c)))
    }

    /// `beta·u + i`, the leaky membrane integration.
    pub fn leaky_integrate(&mut self, u: Var, i: Var, beta: T) -> Result<Var> {
        self.same_shape("leaky_integrate", u, i)?;
        let out = self.zip(u, i, |m, c| beta * m + c);
        self.push(
            "leaky_integrate",
            out,
            &[u, i],
            Rule::Builtin(Op::LeakyIntegrate { beta }),
        )
    }

    /// `u − threshold·s`. With `detach`, no gradient flows into `s`.
    pub fn reset_subtract(&mut self, u: Var, s: Var, threshold: T, detach: bool) -> Result<Var> {
        self.same_shape("reset_subtract", u, s)?;
        let out = self.zip(u, s, |m, spk| m - threshold * spk);
        self.push(
            "reset_subtract",
            out,
            &[u, s],
            Rule::Builtin(Op::Reset { threshold, detach }),
        )
    }

    /// Concatenates equally shaped tensors along the leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("stack of zero tensors".into()));
        };
        let shape = self.value(first).shape().to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * parts.len());
        for &p in parts {
            if self.value(p).shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "stack: {:?} vs {shape:?}",
                    self.value(p).shape()
                )));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut out_shape = shape;
        out_shape[0] *= parts.len();
        let out = Tensor::new(out_shape, data)?;
        self.push("stack", out, parts, Rule::Builtin(Op::Stack))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).rows(start, len)?;
        self.push("rows", out, &[x], Rule::Builtin(Op::Rows { start }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, &[x], Rule::Builtin(Op::Reshape))
    }

    /// Fills the gradient of every trainable leaf reachable from `root`.
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Contract("root is not connected to any trainable tensor".into()));
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(upstream) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.rule, Rule::Leaf) {
                accumulate(&mut self.nodes[idx].grad, upstream);
                continue;
            }
            let need: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let grads = self.vjp(idx, &upstream, &need);
            let parents = self.nodes[idx].parents.clone();
            for ((p, g), needed) in parents.into_iter().zip(grads).zip(need) {
                if let (Some(g), true) = (g, needed) {
                    debug_assert_eq!(g.len(), self.nodes[p.0].value.numel());
                    accumulate(&mut pending[p.0], g);
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, g: &[T], need: &[bool]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[idx];
        let input = |k: usize| &self.nodes[node.parents[k].0].value;
        let op = match &node.rule {
            Rule::Custom(rule) => {
                let ctx = BackwardContext {
                    upstream: g,
                    inputs: (0..node.parents.len()).map(input).collect(),
                    output: &node.value,
                };
                return rule.backward(&ctx);
            }
            Rule::Builtin(op) => op,
            Rule::Leaf => unreachable!("leaves have no parents"),
        };
        match op {
            Op::Affine { batch, inputs, outputs } => {
                let (dx, dw, db) = kernels::affine_backward(
                    g,
                    input(0).data(),
                    input(1).data(),
                    (*batch, *inputs, *outputs),
                    [need[0], need[1], need[2]],
                );
                vec![dx, dw, db]
            }
            Op::Conv2d(geo) => {
                let (dx, dk, db) =
                    kernels::conv2d_backward(g, input(0).data(), input(1).data(), geo, [need[0], need[1], need[2]]);
                vec![dx, dk, db]
            }
            Op::MaxPool { argmax } => {
                let mut dx = vec![T::zero(); input(0).numel()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    dx[a as usize] += gv;
                }
                vec![Some(dx)]
            }
            Op::Relu => {
                let dx = input(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![Some(dx)]
            }
            Op::SoftmaxCrossEntropy { probs, targets } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = g[0] / T::lit(rows as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * cols + t] -= scale;
                }
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(vec![g[0]; input(0).numel()])],
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
            Op::Mul => {
                let (a, b) = (input(0).data(), input(1).data());
                vec![
                    need[0].then(|| g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect()),
                    need[1].then(|| g.iter().zip(a).map(|(&gv, &av)| gv * av).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
            Op::LeakyIntegrate { beta } => {
                vec![
                    need[0].then(|| g.iter().map(|&v| v * *beta).collect()),
                    Some(g.to_vec()),
                ]
            }
            Op::Reset { threshold, detach } => vec![
                Some(g.to_vec()),
                (!detach).then(|| g.iter().map(|&v| -v * *threshold).collect()),
            ],
            Op::Stack => {
                let n = node.parents.len();
                let chunk = g.len() / n;
                (0..n)
                    .map(|k| need[k].then(|| g[k * chunk..(k + 1) * chunk].to_vec()))
                    .collect()
            }
            Op::Rows { start } => {
                let src = input(0);
                let stride = src.numel() / src.shape()[0];
                let mut dx = vec![T::zero(); src.numel()];
                dx[start * stride..start * stride + g.len()].copy_from_slice(g);
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}
