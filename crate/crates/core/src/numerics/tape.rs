//! Reverse-mode differentiation over a closed op set.
//!
//! A [`Graph`] records every op as a node holding its output value. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is one reverse sweep.

use super::ops::{self, Activation};
use super::Tensor;
use crate::error::{Error, Result};
use crate::ssm;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    AddRows { x: Var, rows: Var },
    Scale { x: Var, s: f64 },
    Act { x: Var, act: Activation },
    Conv { x: Var, kernel: Var, dilation: usize },
    MeanPool { x: Var },
    Embed { table: Var, ids: Vec<usize> },
    Concat { a: Var, b: Var },
    CrossEntropy { logits: Var, dlogits: Tensor },
    SsmKernel { rho: Var, b: Var, c: Var, delta: Vec<f64> },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient table produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient for `v`, or zeros shaped like `like`.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| like.zeros_like())
    }
}

/// Single-threaded recording tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w))?;
        self.push("matmul", out, Op::Linear { x, w }, &[x, w])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    /// `x[..., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let mut out = self.value(x).clone();
        let bs = self.value(bias).data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bs) {
                *o += b;
            }
        }
        self.push("add_bias", out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// `x[B×c×d] + rows[B×d]`, broadcasting each row over the token axis.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let xs = self.shape(x);
        let rs = self.shape(rows);
        if xs.len() != 3 || rs != [xs[0], xs[2]] {
            return Err(Error::shape("add_rows", format!("{xs:?} + {rs:?}")));
        }
        let (len, d) = (xs[1], xs[2]);
        let mut out = self.value(x).clone();
        let rd = self.value(rows).data();
        for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
            let b = i / len.max(1);
            for (o, r) in row.iter_mut().zip(&rd[b * d..(b + 1) * d]) {
                *o += r;
            }
        }
        self.push("add_rows", out, Op::AddRows { x, rows }, &[x, rows])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale { x, s }, &[x])
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Result<Var> {
        let out = ops::elementwise(act, self.value(x));
        self.push(act.name(), out, Op::Act { x, act }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Gelu, x)
    }

    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let out = ops::causal_conv1d(self.value(x), self.value(kernel), dilation)?;
        self.push(
            "causal_conv1d",
            out,
            Op::Conv {
                x,
                kernel,
                dilation,
            },
            &[x, kernel],
        )
    }

    pub fn mean_pool_tokens(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_pool_tokens(self.value(x))?;
        self.push("mean_pool_tokens", out, Op::MeanPool { x }, &[x])
    }

    /// Row lookup `table[ids]`, output shaped `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("table {ts:?}, {} ids into {shape:?}", ids.len()),
            ));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let tab = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(
            "embedding",
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenates two rank-2 tensors along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat", format!("{sa:?} ++ {sb:?}")));
        }
        let (rows, p, q) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&da[r * p..(r + 1) * p]);
            data.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let out = Tensor::new([rows, p + q], data)?;
        self.push("concat", out, Op::Concat { a, b }, &[a, b])
    }

    /// Mean cross-entropy over non-ignored targets (scalar).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let valid = targets
            .iter()
            .filter(|&&t| t != ops::IGNORE_TARGET)
            .count()
            .max(1);
        let weights = vec![1.0 / valid as f64; targets.len()];
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `Σ_i weights[i]·CE_i` over the rows of `logits[..., V]` (scalar).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (loss, dlogits) = ops::weighted_cross_entropy(self.value(logits), targets, weights)?;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, dlogits },
            &[logits],
        )
    }

    /// Zero-order-hold diagonal state-space kernel `[taps×d]` from the
    /// log-decay `rho`, input map `b` and output map `c`.
    pub fn ssm_kernel(
        &mut self,
        rho: Var,
        b: Var,
        c: Var,
        delta: &[f64],
        taps: usize,
    ) -> Result<Var> {
        let out = ssm::kernel_from_rho(
            self.value(rho).data(),
            self.value(b).data(),
            self.value(c).data(),
            delta,
            taps,
        )?;
        self.push(
            "ssm_kernel",
            out,
            Op::SsmKernel {
                rho,
                b,
                c,
                delta: delta.to_vec(),
            },
            &[rho, b, c],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum { x }, &[x])
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let k = wv.shape()[0];
                let p = wv.shape()[1];
                let m = xv.len() / k.max(1);
                if self.wants(*x) {
                    let mut gx = xv.zeros_like();
                    ops::gemm(m, p, k, gy.data(), false, wv.data(), true, gx.data_mut(), 0.0);
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = wv.zeros_like();
                    ops::gemm(k, m, p, xv.data(), true, gy.data(), false, gw.data_mut(), 0.0);
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let g = gy.zip_map(self.value(*b), |g, y| g * y).expect("same shape");
                    self.accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = gy.zip_map(self.value(*a), |g, x| g * x).expect("same shape");
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, gy.clone());
                if self.wants(*bias) {
                    let d = gy.last_dim();
                    let mut gb = Tensor::zeros([d]);
                    for row in gy.data().chunks(d) {
                        for (o, g) in gb.data_mut().iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::AddRows { x, rows } => {
                self.accumulate(grads, *x, gy.clone());
                if self.wants(*rows) {
                    let s = gy.shape();
                    let (batch, len, d) = (s[0], s[1], s[2]);
                    let mut gr = Tensor::zeros([batch, d]);
                    for b in 0..batch {
                        let out = &mut gr.data_mut()[b * d..(b + 1) * d];
                        for t in 0..len {
                            let start = (b * len + t) * d;
                            for (o, g) in out.iter_mut().zip(&gy.data()[start..start + d]) {
                                *o += g;
                            }
                        }
                    }
                    self.accumulate(grads, *rows, gr);
                }
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, gy.map(|g| g * s));
            }
            Op::Act { x, act } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gy.data())
                    .map(|((&xi, &yi), &g)| g * act.derivative(xi, yi))
                    .collect();
                let g = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
                self.accumulate(grads, *x, g);
            }
            Op::Conv {
                x,
                kernel,
                dilation,
            } => {
                let (gx, gk) = ops::causal_conv1d_backward(
                    self.value(*x),
                    self.value(*kernel),
                    *dilation,
                    gy,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *kernel, gk);
            }
            Op::MeanPool { x } => {
                let s = self.shape(*x);
                let (len, d) = (s[1], s[2]);
                let inv = 1.0 / len as f64;
                let gyd = gy.data();
                let g = Tensor::from_fn(s.to_vec(), |i| {
                    let b = i / (len * d);
                    gyd[b * d + i % d] * inv
                });
                self.accumulate(grads, *x, g);
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut gt = tv.zeros_like();
                {
                    let gtd = gt.data_mut();
                    for (row, &i) in gy.data().chunks(d).zip(ids) {
                        for (o, g) in gtd[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Concat { a, b } => {
                let p = self.shape(*a)[1];
                let q = self.shape(*b)[1];
                let rows = self.shape(*a)[0];
                let gyd = gy.data();
                if self.wants(*a) {
                    let g = Tensor::from_fn([rows, p], |i| gyd[(i / p) * (p + q) + i % p]);
                    self.accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = Tensor::from_fn([rows, q], |i| gyd[(i / q) * (p + q) + p + i % q]);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::CrossEntropy { logits, dlogits } => {
                let s = gy.item();
                self.accumulate(grads, *logits, dlogits.map(|v| v * s));
            }
            Op::SsmKernel { rho, b, c, delta } => {
                let (grho, gb, gc) = ssm::kernel_from_rho_backward(
                    self.value(*rho).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    delta,
                    gy,
                );
                self.accumulate(grads, *rho, grho);
                self.accumulate(grads, *b, gb);
                self.accumulate(grads, *c, gc);
            }
            Op::Sum { x } => {
                let s = gy.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full([2], 3.0));
        let x = g.param(Tensor::full([2], 1.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full([1], 2.0));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let s = g.sum(z).unwrap();
        assert_eq!(g.backward(s).get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn nan_names_the_op() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full([1], f64::MAX));
        let err = g.add(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add" }));
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut g = Graph::new();
        let t = g.param(Tensor::zeros([4, 2]));
        assert!(matches!(g.embedding(t, &[1, 4], &[2]), Err(Error::Index(_))));
    }
}
