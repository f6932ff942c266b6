//! Tape-style reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records nodes in creation order, which is already a
//! topological order, so [`Graph::backward`] walks the tape in reverse.
//! Matrix-shaped ops view a tensor as `[rows, cols]` where the last axis is
//! the column axis (see [`Tensor::rows_cols`]).
//!
//! Parameters enter the graph through [`Graph::param`]; after a backward pass
//! their gradients are pushed into the owning [`ParamStore`] with
//! [`Graph::accumulate_into`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{rows_cols, Tensor};

/// Guard used by [`Graph::l2_normalize`]: vectors are divided by
/// `max(norm, L2_EPS)`.
pub const L2_EPS: f64 = 1e-12;

/// Marker in a gather index table meaning "emit zero" (used for padding).
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    L2Normalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    Concat(Vec<NodeId>),
    BroadcastRows(NodeId),
    MeanRows(NodeId),
    Gather {
        x: NodeId,
        index: Rc<[u32]>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        target: usize,
    },
    SquaredError {
        x: NodeId,
        target: Vec<f64>,
    },
    SqDist(NodeId, NodeId),
    WeightedSum(Vec<(f64, NodeId)>),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to `id`, if any
    /// flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant leaf: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf that is not backed by a parameter store; its
    /// gradient can be read back with [`grad`](Self::grad).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Per-row affine map: `x [N, in] @ w [in, out] + b [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, cin) = rows_cols(&xs);
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let cout = ws[1];
        let mut out = vec![0.0; n * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != cout {
                return Err(Error::shape("linear bias", &ws, bv.shape()));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            n,
            cin,
            cout,
            self.value(x).data(),
            (cin as isize, 1),
            self.value(w).data(),
            (cout as isize, 1),
            &mut out,
        );
        let mut shape = xs.clone();
        if shape.is_empty() {
            shape.push(cout);
        } else {
            *shape.last_mut().expect("non-empty") = cout;
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    /// `max(0, x)`; the hinge used by margin losses.
    pub fn hinge(&mut self, x: NodeId) -> NodeId {
        self.relu(x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Normalises every row to unit L2 norm; rows with norm below
    /// [`L2_EPS`] are divided by `L2_EPS` instead.
    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (n, c) = v.rows_cols();
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(c.max(1)).take(n) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let d = norm.max(L2_EPS);
            for a in row.iter_mut() {
                *a /= d;
            }
            norms.push(norm);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(t, Op::L2Normalize { x, norms }, rg)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _) = self.value(*first).rows_cols();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc) = self.value(*p).rows_cols();
            if pn != n {
                return Err(Error::shape(
                    "concat",
                    self.value(*first).shape(),
                    self.value(*p).shape(),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..n {
                out[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Tiles a single row `[C]` (or `[1, C]`) into `[rows, C]`.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (n, c) = v.rows_cols();
        if n != 1 {
            return Err(Error::shape("broadcast_rows", v.shape(), &[1, c]));
        }
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(v.data());
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::BroadcastRows(x), rg))
    }

    /// Mean over rows: `[N, C] -> [C]`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (n, c) = v.rows_cols();
        let mut out = vec![0.0; c];
        for row in v.data().chunks(c.max(1)).take(n) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::from_vec(out), Op::MeanRows(x), rg)
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: NodeId, index: Rc<[u32]>, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else {
                let i = i as usize;
                if i >= src.len() {
                    return Err(Error::shape("gather index", &[i], self.value(x).shape()));
                }
                out.push(src[i]);
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, rg))
    }

    /// Cross entropy between `softmax(logits)` (all elements, flattened) and
    /// the one-hot vector at `target`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if target >= v.len() {
            return Err(Error::shape("softmax_cross_entropy target", &[target], v.shape()));
        }
        let probs = softmax(v.data());
        let loss = log_sum_exp(v.data()) - v.data()[target];
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            },
            rg,
        ))
    }

    /// `sum((x - target)^2)` against a constant target.
    pub fn squared_error(&mut self, x: NodeId, target: &[f64]) -> Result<NodeId> {
        let v = self.value(x);
        if v.len() != target.len() {
            return Err(Error::shape("squared_error", v.shape(), &[target.len()]));
        }
        let s = v
            .data()
            .iter()
            .zip(target)
            .map(|(a, t)| (a - t) * (a - t))
            .sum();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SquaredError {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Squared Euclidean distance between two equal-size tensors.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::shape("sq_dist", va.shape(), vb.shape()));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::SqDist(a, b), rg))
    }

    /// `sum_i w_i * x_i` over equal-shape tensors.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let (_, first) = *terms
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum of zero terms"))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(w, id) in terms {
            let v = self.value(id);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, v.shape()));
            }
            for (o, a) in out.iter_mut().zip(v.data()) {
                *o += w * a;
            }
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.1).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let bias = self.constant(Tensor::new(shape.clone(), vec![c; self.value(x).len()]).expect("shape"));
        self.weighted_sum(&[(1.0, x), (1.0, bias)])
            .expect("same shape by construction")
    }

    /// Detaches the gradient buffer of `id` (zero-filled on first use) so it
    /// can be written while other node values are borrowed. `None` when the
    /// node does not require a gradient.
    fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(node.grad.take().unwrap_or_else(|| vec![0.0; n]))
    }

    fn put_grad(&mut self, id: NodeId, g: Vec<f64>) {
        self.nodes[id.0].grad = Some(g);
    }

    /// Applies `f(dx, values)` to the gradient buffer of `x` if it needs one.
    fn with_grad(&mut self, x: NodeId, f: impl FnOnce(&mut [f64], &Graph)) {
        if let Some(mut d) = self.take_grad(x) {
            f(&mut d, self);
            self.put_grad(x, d);
        }
    }

    /// Back-propagates from the scalar node `root` (seeded with gradient 1).
    /// Clears any gradients left by a previous call.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward needs a scalar root, got shape {:?}",
            self.value(root).shape()
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
            self.backward_node(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
    }

    fn backward_node(&mut self, i: usize, op: &Op, g: &[f64]) {
        let out = NodeId(i);
        match op {
            Op::Constant | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (n, cin) = self.value(*x).rows_cols();
                let cout = self.value(*w).shape()[1];
                self.with_grad(*x, |dx, gr| {
                    // dx += g [n, cout] @ w^T [cout, cin]
                    let wv = gr.value(*w).data();
                    gemm(n, cout, cin, g, (cout as isize, 1), wv, (1, cout as isize), dx);
                });
                self.with_grad(*w, |dw, gr| {
                    // dw += x^T [cin, n] @ g [n, cout]
                    let xv = gr.value(*x).data();
                    gemm(cin, n, cout, xv, (1, cin as isize), g, (cout as isize, 1), dw);
                });
                if let Some(b) = b {
                    self.with_grad(*b, |db, _| {
                        for row in g.chunks(cout) {
                            for (d, a) in db.iter_mut().zip(row) {
                                *d += a;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => self.with_grad(*x, |dx, gr| {
                for ((d, o), gi) in dx.iter_mut().zip(gr.value(out).data()).zip(g) {
                    if *o > 0.0 {
                        *d += gi;
                    }
                }
            }),
            Op::Sigmoid(x) => self.with_grad(*x, |dx, gr| {
                for ((d, s), gi) in dx.iter_mut().zip(gr.value(out).data()).zip(g) {
                    *d += gi * s * (1.0 - s);
                }
            }),
            Op::Exp(x) => self.with_grad(*x, |dx, gr| {
                for ((d, e), gi) in dx.iter_mut().zip(gr.value(out).data()).zip(g) {
                    *d += gi * e;
                }
            }),
            Op::L2Normalize { x, norms } => self.with_grad(*x, |dx, gr| {
                let y_all = gr.value(out).data();
                let c = gr.value(out).rows_cols().1.max(1);
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &y_all[r * c..(r + 1) * c];
                    let gr_ = &g[r * c..(r + 1) * c];
                    let d = &mut dx[r * c..(r + 1) * c];
                    if norm > L2_EPS {
                        let dot: f64 = y.iter().zip(gr_).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            d[k] += (gr_[k] - y[k] * dot) / norm;
                        }
                    } else {
                        for k in 0..c {
                            d[k] += gr_[k] / L2_EPS;
                        }
                    }
                }
            }),
            Op::Concat(parts) => {
                let (n, total) = self.value(out).rows_cols();
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).rows_cols().1;
                    self.with_grad(*p, |dp, _| {
                        for r in 0..n {
                            let src = &g[r * total + col..r * total + col + w];
                            for (d, a) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += a;
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::BroadcastRows(x) => {
                let c = self.value(out).rows_cols().1.max(1);
                self.with_grad(*x, |dx, _| {
                    for row in g.chunks(c) {
                        for (d, a) in dx.iter_mut().zip(row) {
                            *d += a;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (n, c) = self.value(*x).rows_cols();
                let inv = 1.0 / n as f64;
                self.with_grad(*x, |dx, _| {
                    for row in dx.chunks_mut(c.max(1)) {
                        for (d, a) in row.iter_mut().zip(g) {
                            *d += a * inv;
                        }
                    }
                });
            }
            Op::Gather { x, index } => self.with_grad(*x, |dx, _| {
                for (&k, gi) in index.iter().zip(g) {
                    if k != GATHER_ZERO {
                        dx[k as usize] += gi;
                    }
                }
            }),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            } => self.with_grad(*logits, |dx, _| {
                for (k, (d, p)) in dx.iter_mut().zip(probs).enumerate() {
                    let onehot = if k == *target { 1.0 } else { 0.0 };
                    *d += g[0] * (p - onehot);
                }
            }),
            Op::SquaredError { x, target } => self.with_grad(*x, |dx, gr| {
                for ((d, a), t) in dx.iter_mut().zip(gr.value(*x).data()).zip(target) {
                    *d += 2.0 * (a - t) * g[0];
                }
            }),
            Op::SqDist(a, b) => {
                let (a, b) = (*a, *b);
                self.with_grad(a, |da, gr| {
                    for ((d, x), y) in da.iter_mut().zip(gr.value(a).data()).zip(gr.value(b).data()) {
                        *d += 2.0 * (x - y) * g[0];
                    }
                });
                self.with_grad(b, |db, gr| {
                    for ((d, x), y) in db.iter_mut().zip(gr.value(a).data()).zip(gr.value(b).data()) {
                        *d -= 2.0 * (x - y) * g[0];
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(w, id) in terms {
                    self.with_grad(id, |d, _| {
                        for (dd, gi) in d.iter_mut().zip(g) {
                            *dd += w * gi;
                        }
                    });
                }
            }
        }
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for n in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&n.op, &n.grad) {
                store.accumulate_grad(*id, g);
            }
        }
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    e
}

/// `c += a @ b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]` row-major; `a` and
/// `b` strides are given as (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie entirely inside the
    // given slices (checked by the callers' shape validation), and `c` does
    // not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(root)/d(leaf) for every leaf element.
    fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|t| g.variable(t.clone())).collect();
            let r = build(&mut g, &ids);
            g.value(r).item()
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.variable(t.clone())).collect();
        let root = build(&mut g, &ids);
        g.backward(root);
        let h = 1e-5;
        for (li, id) in ids.iter().enumerate() {
            let analytic = g.grad(*id).map(|s| s.to_vec()).unwrap_or(vec![0.0; leaves[li].len()]);
            for e in 0..leaves[li].len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "leaf {li}[{e}]: analytic {a}, fd {fd}");
            }
        }
    }

    /// Reduces any tensor to a scalar with fixed random weights so every
    /// output element is exercised.
    fn reduce(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_tensor(&mut rng, g.value(x).shape());
        let target: Vec<f64> = t.data().to_vec();
        g.squared_error(x, &target).unwrap()
    }

    #[test]
    fn linear_and_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            rand_tensor(&mut rng, &[5, 4]),
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check(leaves, |g, ids| {
            let y = g.linear(ids[0], ids[1], Some(ids[2])).unwrap();
            let r = g.relu(y);
            reduce(g, r, 7)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![rand_tensor(&mut rng, &[2, 3, 2])], |g, ids| {
            let s = g.sigmoid(ids[0]);
            let e = g.exp(s);
            reduce(g, e, 3)
        });
    }

    #[test]
    fn normalize_concat_broadcast_mean_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[5])];
        check(leaves, |g, ids| {
            let a = g.l2_normalize(ids[0]);
            let q = g.l2_normalize(ids[1]);
            let qb = g.broadcast_rows(q, 4).unwrap();
            let c = g.concat(&[a, qb]).unwrap();
            let m = g.mean_rows(c);
            reduce(g, m, 4)
        });
    }

    #[test]
    fn gather_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx: Rc<[u32]> = vec![3, GATHER_ZERO, 0, 5, 5, 1].into();
        check(vec![rand_tensor(&mut rng, &[2, 3])], move |g, ids| {
            let gt = g.gather(ids[0], idx.clone(), vec![6]).unwrap();
            g.softmax_cross_entropy(gt, 3).unwrap()
        });
    }

    #[test]
    fn distance_hinge_weighted_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
        ];
        check(leaves, |g, ids| {
            let dp = g.sq_dist(ids[0], ids[1]).unwrap();
            let dn = g.sq_dist(ids[0], ids[2]).unwrap();
            let s = g.weighted_sum(&[(1.0, dp), (-1.0, dn)]).unwrap();
            let s = g.add_scalar(s, 10.0);
            let h = g.hinge(s);
            g.weighted_sum(&[(0.7, h)]).unwrap()
        });
    }

    #[test]
    fn uniform_softmax_and_shift_invariance() {
        let p = softmax(&[2.0; 7]);
        assert!(p.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
        let x = [0.3, -1.0, 2.5, 2.4];
        let y: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
        let (px, py) = (softmax(&x), softmax(&y));
        assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let am = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(am(&px), am(&py));
    }

    #[test]
    fn relu_backward_masks_negative_inputs() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![2.0, -3.0]));
        let r = g.relu(x);
        let s = g.weighted_sum(&[(1.0, r)]).unwrap();
        let m = g.mean_rows(s);
        let t = g.squared_error(m, &[0.0, 0.0]).unwrap();
        g.backward(t);
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[1], 0.0);
        assert!(gx[0] > 0.0);
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_guard() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let y = g.l2_normalize(x);
        let v = g.value(y).data();
        assert!(((v[0] * v[0] + v[1] * v[1]) - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.5]));
        let s = g.weighted_sum(&[(2.0, x), (3.0, x)]).unwrap();
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
    }
}
