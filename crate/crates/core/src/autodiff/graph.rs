//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! Every node is a `[rows, cols]` matrix (vectors are single rows, scalars are
//! `[1, 1]`). Parameter leaves borrow their values from a [`ParamStore`] so many
//! graphs can be recorded concurrently against one read-only store. A node
//! requires grad iff some ancestor is a trainable parameter or a grad-tracked
//! input; backward skips everything else, so frozen weights carry gradient to
//! upstream trainables without ever receiving one themselves.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, T),
    Unary(Unary, NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Sum(NodeId),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Visibility matrix for attention: `allowed[i * n + j]` iff row `i` may attend to `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Arc<Vec<bool>>,
}

impl AttentionMask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::shape("attention mask", &[n, n], &[allowed.len()]));
        }
        Ok(AttentionMask {
            n,
            allowed: Arc::new(allowed),
        })
    }

    pub fn full(n: usize) -> Self {
        AttentionMask {
            n,
            allowed: Arc::new(vec![true; n * n]),
        }
    }

    pub fn causal(n: usize) -> Self {
        let allowed = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
        AttentionMask {
            n,
            allowed: Arc::new(allowed),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.allowed[i * self.n..(i + 1) * self.n].iter().filter(|&&a| a).count()
    }
}

/// Result of a backward pass: parameter gradients plus per-node gradients.
pub struct Backward<T> {
    params: Gradients<T>,
    nodes: Vec<Option<Vec<T>>>,
}

impl<T: Float> Backward<T> {
    pub fn params(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<T> {
        self.params
    }

    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    check_finite: bool,
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            check_finite: true,
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        match &self.nodes[id.0].value {
            Value::Owned(v) => v,
            Value::Param(p) => self.params.tensor(*p).data(),
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf node for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = self.params.get(id);
        let (rows, cols) = p.tensor.as_matrix_dims();
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: p.trainable(),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<NodeId> {
        self.leaf(rows, cols, data, false)
    }

    /// Input whose gradient is tracked, readable from [`Backward::node`].
    pub fn input_with_grad(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<NodeId> {
        self.leaf(rows, cols, data, true)
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::shape("input", &[rows, cols], &[data.len()]));
        }
        self.push(rows, cols, data, Op::Leaf, requires_grad, "input")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(m, n, out, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_t(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(m, n, out, Op::MatMulT(a, b), rg, "matmul_t")
    }

    /// Elementwise binary op; `b` may be a single row broadcast over the rows of `a`.
    pub fn binary(&mut self, op: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb || !(rb == ra || rb == 1) {
            return Err(Error::shape(
                match op {
                    Binary::Add => "add",
                    Binary::Mul => "mul",
                },
                &[ra, ca],
                &[rb, cb],
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let f = match op {
            Binary::Add => |x: T, y: T| x + y,
            Binary::Mul => |x: T, y: T| x * y,
        };
        let mut out: Vec<T> = Vec::with_capacity(av.len());
        if rb == 1 && ca > 0 {
            for row in av.chunks_exact(ca) {
                out.extend(row.iter().zip(bv).map(|(&x, &y)| f(x, y)));
            }
        } else {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        let rg = self.rg(&[a, b]);
        self.push(ra, ca, out, Op::Binary(op, a, b), rg, "binary")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Scale(a, s), rg, "scale")
    }

    pub fn unary(&mut self, op: Unary, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| match op {
                Unary::Gelu => kernels::gelu(x),
                Unary::Relu => x.max(T::zero()),
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Unary(op, a), rg, "unary")
    }

    /// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Gelu, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a)
    }

    /// Row-wise softmax, max-subtracted.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.softmax_inner(a, None)
    }

    /// Row-wise softmax restricted to the positions `mask` allows; others get 0.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &AttentionMask) -> Result<NodeId> {
        self.softmax_inner(a, Some(mask))
    }

    fn softmax_inner(&mut self, a: NodeId, mask: Option<&AttentionMask>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::Empty("softmax axis"));
        }
        if let Some(m) = mask {
            if m.len() != r || m.len() != c {
                return Err(Error::shape("masked_softmax", &[r, c], &[m.len(), m.len()]));
            }
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.map_or(true, |m| m.allowed(i, j));
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                return Err(Error::Empty("softmax row (fully masked)"));
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - mx).exp();
                    dst[j] = e;
                    sum = sum + e;
                }
            }
            dst.iter_mut().for_each(|v| *v = *v / sum);
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Softmax(a), rg, "softmax")
    }

    /// Per-row normalization to zero mean / unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            let (gr, gc) = self.shape(gain);
            return Err(Error::shape("layer_norm", &[r, d], &[gr, gc]));
        }
        if !(eps > 0.0) {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("dim fits");
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![T::zero(); r * d];
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            r,
            d,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Gathers rows of `table`; backward scatter-adds.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: v,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Mean negative log-softmax over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let (t, v) = self.shape(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape("cross_entropy", &[t, v], &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).find(|&&x| x >= v) {
            return Err(Error::Index {
                what: "cross_entropy targets",
                index: bad,
                bound: v,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::AllMasked);
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &x[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&z| (z - mx).exp()).sum();
            let lse = mx + sum.ln();
            total = total + (lse - row[targets[i]]);
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::from_usize(count).expect("count fits");
        let rg = self.rg(&[logits]);
        self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
            "cross_entropy",
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows inputs"))?;
        let c = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(Error::shape("concat_rows", &[rows, c], &[r, pc]));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, end]));
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        self.push(end - start, c, out, Op::SliceRows(a, start), rg, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols inputs"))?;
        let r = self.shape(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::shape("concat_cols", &[r], &[pr, pc]));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(r, c, out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, end]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[a]);
        self.push(r, end - start, out, Op::SliceCols(a, start), rg, "slice_cols")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_usize(n).expect("len fits"))
    }

    pub fn scalar(&self, id: NodeId) -> Option<T> {
        match self.shape(id) {
            (1, 1) => Some(self.value(id)[0]),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Backward<T>> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::shape("backward (loss must be scalar)", &[r, c], &[1, 1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Gradients::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Backward { params, nodes: grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Ok(Backward { params, nodes: grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], params: &mut Gradients<T>) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => params.insert(*pid, g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_t(g, self.value(*b), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn(self.value(*a), g, &mut db, m, k, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul(g, self.value(*b), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    kernels::matmul_tn(g, self.value(*a), &mut db, m, n, k);
                    accumulate(grads, *b, db);
                }
            }
            Op::Binary(op, a, b) => {
                let (rb, cb) = self.shape(*b);
                if wants(*a) {
                    let da = match op {
                        Binary::Add => g.to_vec(),
                        Binary::Mul => {
                            let bv = self.value(*b);
                            if rb == 1 && cb > 0 {
                                g.chunks_exact(cb)
                                    .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x * y))
                                    .collect()
                            } else {
                                g.iter().zip(bv).map(|(&x, &y)| x * y).collect()
                            }
                        }
                    };
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let av = self.value(*a);
                    let mut db = vec![T::zero(); rb * cb];
                    let width = if rb == 1 { cb.max(1) } else { db.len().max(1) };
                    for (grow, arow) in g.chunks(width).zip(av.chunks(width)) {
                        for ((d, &x), &a) in db.iter_mut().zip(grow).zip(arow) {
                            *d = *d
                                + match op {
                                    Binary::Add => x,
                                    Binary::Mul => x * a,
                                };
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().map(|&x| x * *s).collect());
                }
            }
            Op::Unary(op, a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let da = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| {
                            gi * match op {
                                Unary::Gelu => kernels::gelu_grad(xi),
                                Unary::Relu => {
                                    if xi > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                            }
                        })
                        .collect();
                    accumulate(grads, *a, da);
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = match &node.value {
                        Value::Owned(v) => v.as_slice(),
                        Value::Param(_) => unreachable!("softmax output is owned"),
                    };
                    let c = node.cols;
                    let mut da = vec![T::zero(); y.len()];
                    for i in 0..node.rows {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            da[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, d) = (node.rows, node.cols);
                let gv = self.value(*gain);
                if wants(*x) {
                    let dn = T::from_usize(d).expect("dim fits");
                    let mut dx = vec![T::zero(); r * d];
                    for i in 0..r {
                        let gr = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[i * d + j] = rstd[i] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for i in 0..r {
                        for j in 0..d {
                            dg[j] = dg[j] + g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for i in 0..r {
                        for j in 0..d {
                            db[j] = db[j] + g[i * d + j];
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let (v, d) = self.shape(*table);
                    let mut dt = vec![T::zero(); v * d];
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] = dt[i * d + j] + g[row * d + j];
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let (t, v) = self.shape(*logits);
                    let scale = g[0] / T::from_usize(*count).expect("count fits");
                    let mut dl = vec![T::zero(); t * v];
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..v {
                            dl[i * v + j] = probs[i * v + j] * scale;
                        }
                        dl[i * v + targets[i]] = dl[i * v + targets[i]] - scale;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
            Op::ConcatRows(parts) => {
                let c = node.cols;
                let mut off = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if wants(p) {
                        accumulate(grads, p, g[off * c..(off + r) * c].to_vec());
                    }
                    off += r;
                }
            }
            Op::SliceRows(a, start) => {
                if wants(*a) {
                    let (r, c) = self.shape(*a);
                    let mut da = vec![T::zero(); r * c];
                    da[start * c..start * c + g.len()].copy_from_slice(g);
                    accumulate(grads, *a, da);
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.cols;
                let mut off = 0;
                for &p in parts {
                    let (r, w) = self.shape(p);
                    if wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * c + off..i * c + off + w]);
                        }
                        accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let (r, c) = self.shape(*a);
                    let w = node.cols;
                    let mut da = vec![T::zero(); r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let n = self.value(*a).len();
                    accumulate(grads, *a, vec![g[0]; n]);
                }
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
    match &mut grads[id.0] {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(contrib),
    }
}
