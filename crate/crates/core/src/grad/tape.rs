//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! Every operation evaluates eagerly and appends one node to the tape. Node
//! ids are handed out in creation order, so the tape is topologically sorted
//! by construction and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::{Array, Grads, ParamId, ParamStore};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatVec(NodeId, NodeId),
    MatTVec(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    StackRows(Vec<NodeId>),
    Row(NodeId, usize),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId, f64),
    Pick(NodeId, usize),
    Sum(NodeId),
    Dot(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
}

/// Gradients of one backward sweep, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct TapeGrads {
    by_param: Vec<(ParamId, Array)>,
}

impl TapeGrads {
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.by_param.iter().map(|(p, a)| (*p, a))
    }

    /// Adds `scale * self` into dense gradients.
    pub fn accumulate_into(&self, grads: &mut Grads, scale: f64) {
        for (p, g) in &self.by_param {
            grads.get_mut(*p).add_scaled(g, scale);
        }
    }

    pub fn to_dense(&self, store: &ParamStore) -> Grads {
        let mut grads = store.zero_grads();
        self.accumulate_into(&mut grads, 1.0);
        grads
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Array) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// True when the node was produced from a constant leaf (no parameter
    /// reaches it).
    pub fn is_constant(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Constant)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array::scalar(v))
    }

    /// Registers a parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(Op::Param, store.get(id).clone());
        self.params.insert(id, n);
        n
    }

    /// `W x` for `W: [r, c]`, `x: [c]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (wv, xv) = (self.value(w), self.value(x));
        let (r, c) = (wv.rows(), wv.cols());
        assert_eq!(c, xv.len(), "matvec shape mismatch");
        let xs = xv.data();
        let out: Vec<f64> = (0..r)
            .map(|i| wv.row(i).iter().zip(xs).map(|(a, b)| a * b).sum())
            .collect();
        self.push(Op::MatVec(w, x), Array::vector(out))
    }

    /// `Mᵀ x` for `M: [r, c]`, `x: [r]`.
    pub fn matvec_t(&mut self, m: NodeId, x: NodeId) -> NodeId {
        let (mv, xv) = (self.value(m), self.value(x));
        let (r, c) = (mv.rows(), mv.cols());
        assert_eq!(r, xv.len(), "matvec_t shape mismatch");
        let mut out = vec![0.0; c];
        for (i, &xi) in xv.data().iter().enumerate() {
            for (o, a) in out.iter_mut().zip(mv.row(i)) {
                *o += a * xi;
            }
        }
        self.push(Op::MatTVec(m, x), Array::vector(out))
    }

    /// `A Bᵀ` for `A: [m, k]`, `B: [n, k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_bt shape mismatch");
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = av.row(i);
            for j in 0..n {
                out.push(ar.iter().zip(bv.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        let value = Array::from_vec(vec![m, n], out).expect("matmul_bt output");
        self.push(Op::MatMulBt(a, b), value)
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (mv, vv) = (self.value(m), self.value(v));
        let c = mv.cols();
        assert_eq!(c, vv.len(), "add_row shape mismatch");
        let mut out = mv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(m, v), out)
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Array::from_vec(av.shape().to_vec(), data).expect("elementwise output");
        self.push(op, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Array::from_vec(av.shape().to_vec(), data).expect("map output");
        self.push(op, value)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Concatenates flat values end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Op::Concat(parts.to_vec()), Array::vector(out))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.value(a).data()[start..start + len].to_vec();
        self.push(Op::Slice(a, start), Array::vector(out))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let c = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let v = self.value(r);
            assert_eq!(v.len(), c, "stack_rows length mismatch");
            out.extend_from_slice(v.data());
        }
        let value = Array::from_vec(vec![rows.len(), c], out).expect("stack_rows output");
        self.push(Op::StackRows(rows.to_vec()), value)
    }

    /// Row `i` of a matrix, as a vector (embedding lookup).
    pub fn row(&mut self, m: NodeId, i: usize) -> NodeId {
        let out = self.value(m).row(i).to_vec();
        self.push(Op::Row(m, i), Array::vector(out))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let out = stable_softmax(self.value(a).data(), 1.0);
        self.push(Op::Softmax(a), Array::vector(out))
    }

    /// `log softmax(a / tau)`.
    pub fn log_softmax(&mut self, a: NodeId, tau: f64) -> NodeId {
        let xs = self.value(a).data();
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
        let lse = xs.iter().map(|x| (x / tau - max).exp()).sum::<f64>().ln() + max;
        let out = xs.iter().map(|x| x / tau - lse).collect();
        self.push(Op::LogSoftmax(a, tau), Array::vector(out))
    }

    pub fn pick(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = self.value(a).data()[i];
        self.push(Op::Pick(a, i), Array::scalar(v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Array::scalar(v))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "dot length mismatch");
        let v = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), Array::scalar(v))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> NodeId {
        match terms {
            [] => self.scalar(0.0),
            [one] => *one,
            _ => {
                let c = self.concat(terms);
                self.sum(c)
            }
        }
    }

    /// Gradient of a scalar node with respect to every registered parameter.
    pub fn backward(&self, loss: NodeId) -> Result<TapeGrads> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        Ok(self.backward_weighted(&[(loss, 1.0)]))
    }

    /// Vector-Jacobian product seeded with `sum_k w_k * node_k` for scalar
    /// nodes.
    pub fn backward_weighted(&self, seeds: &[(NodeId, f64)]) -> TapeGrads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for &(n, w) in seeds {
            assert_eq!(self.value(n).len(), 1, "seed nodes must be scalar");
            let g = grads[n.0].get_or_insert_with(|| vec![0.0]);
            g[0] += w;
            top = top.max(n.0 + 1);
        }

        for idx in (0..top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatVec(w, x) => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let c = wv.cols();
                    {
                        let gw = acc(&mut grads, *w, wv.len());
                        for (i, gi) in g.iter().enumerate() {
                            if *gi == 0.0 {
                                continue;
                            }
                            for (o, xj) in gw[i * c..(i + 1) * c].iter_mut().zip(xv.data()) {
                                *o += gi * xj;
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, c);
                    for (i, gi) in g.iter().enumerate() {
                        for (o, a) in gx.iter_mut().zip(wv.row(i)) {
                            *o += a * gi;
                        }
                    }
                }
                Op::MatTVec(m, x) => {
                    let (mv, xv) = (self.value(*m), self.value(*x));
                    let (r, c) = (mv.rows(), mv.cols());
                    {
                        let gm = acc(&mut grads, *m, mv.len());
                        for (i, xi) in xv.data().iter().enumerate() {
                            for (o, gj) in gm[i * c..(i + 1) * c].iter_mut().zip(&g) {
                                *o += xi * gj;
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, r);
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += mv.row(i).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    {
                        let ga = acc(&mut grads, *a, m * k);
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for (o, bv) in ga[i * k..(i + 1) * k].iter_mut().zip(bv.row(j)) {
                                    *o += gij * bv;
                                }
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for (o, a) in gb[j * k..(j + 1) * k].iter_mut().zip(av.row(i)) {
                                *o += gij * a;
                            }
                        }
                    }
                }
                Op::AddRow(m, v) => {
                    let c = self.value(*v).len();
                    add_into(acc(&mut grads, *m, g.len()), &g);
                    let gv = acc(&mut grads, *v, c);
                    for row in g.chunks(c) {
                        add_into(gv, row);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *b, g.len());
                    for (o, gi) in gb.iter_mut().zip(&g) {
                        *o -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), y) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gi * y;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((o, gi), x) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gi * x;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (o, gi) in ga.iter_mut().zip(&g) {
                        *o += s * gi;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        add_into(acc(&mut grads, *p, n), &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.value(*a).len();
                    let ga = acc(&mut grads, *a, n);
                    add_into(&mut ga[*start..*start + g.len()], &g);
                }
                Op::StackRows(rows) => {
                    let c = self.value(rows[0]).len();
                    for (r, chunk) in rows.iter().zip(g.chunks(c)) {
                        add_into(acc(&mut grads, *r, c), chunk);
                    }
                }
                Op::Row(m, i) => {
                    let mv = self.value(*m);
                    let c = mv.cols();
                    let gm = acc(&mut grads, *m, mv.len());
                    add_into(&mut gm[i * c..(i + 1) * c], &g);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gi * yi;
                    }
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), xi) in ga.iter_mut().zip(&g).zip(x) {
                        *o += 2.0 * gi * xi;
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += yi * (gi - dot);
                    }
                }
                Op::LogSoftmax(a, tau) => {
                    let y = node.value.data();
                    let total: f64 = g.iter().sum();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += (gi - yi.exp() * total) / tau;
                    }
                }
                Op::Pick(a, i) => {
                    let n = self.value(*a).len();
                    acc(&mut grads, *a, n)[*i] += g[0];
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    for o in acc(&mut grads, *a, n) {
                        *o += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, av.len());
                    for (o, y) in ga.iter_mut().zip(bv) {
                        *o += g[0] * y;
                    }
                    let gb = acc(&mut grads, *b, bv.len());
                    for (o, x) in gb.iter_mut().zip(av) {
                        *o += g[0] * x;
                    }
                }
            }
        }

        let mut by_param: Vec<(ParamId, Array)> = self
            .params
            .iter()
            .map(|(&p, &n)| {
                let shape = self.value(n).shape().to_vec();
                let value = match grads[n.0].take() {
                    Some(g) => Array::from_vec(shape, g).expect("param grad shape"),
                    None => Array::zeros(&shape),
                };
                (p, value)
            })
            .collect();
        by_param.sort_by_key(|(p, _)| *p);
        TapeGrads { by_param }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn stable_softmax(xs: &[f64], tau: f64) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| ((x - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}
