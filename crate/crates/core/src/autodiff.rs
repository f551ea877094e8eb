//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and whatever the
//! backward rule needs. `Tape::backward` walks the nodes in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//! Nodes whose inputs do not require gradients are skipped entirely.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Gelu,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Gelu,
    Exp,
    Log,
    Tanh,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Which operand repeats to fill the output: the smaller operand's shape
/// is a suffix of the larger (or it holds a single value).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    RhsRepeats,
    LhsRepeats,
}

/// Deliberate backward corruption, used as a negative control for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    GeluBackwardScale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        // (a batch index, b batch index) per output batch
        pairs: Vec<(usize, usize)>,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
        bcast: Broadcast,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Take {
        x: Var,
        idx: Arc<[usize]>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    ReduceAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    probes: RefCell<Option<Vec<(String, Var)>>>,
    fault: Option<Fault>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Every op errors with [`Error::NonFinite`] if it produces NaN or Inf.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    /// Enables recording of tagged intermediate values (see [`Tape::probe`]).
    pub fn with_probes(self) -> Self {
        *self.probes.borrow_mut() = Some(Vec::new());
        self
    }

    pub fn probe(&self, tag: &str, v: Var) {
        if let Some(p) = self.probes.borrow_mut().as_mut() {
            p.push((tag.to_string(), v));
        }
    }

    pub fn probes(&self) -> Vec<(String, Var)> {
        self.probes.borrow().clone().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- contraction -------------------------------------------------

    /// Batched matrix product `a @ b` with broadcast batch dimensions.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two dimensions.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (value, m, k, n, pairs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, n) = if trans_b {
                (sb[sb.len() - 1], sb[sb.len() - 2])
            } else {
                (sb[sb.len() - 2], sb[sb.len() - 1])
            };
            if k != kb {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (batch, pairs) = broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
                .ok_or_else(|| Error::shape("matmul", sa, sb))?;
            let mut out = vec![0.0; pairs.len() * m * n];
            let (da, db) = (ta.data(), tb.data());
            for (o, &(ia, ib)) in pairs.iter().enumerate() {
                let a_blk = &da[ia * m * k..(ia + 1) * m * k];
                let b_blk = &db[ib * k * n..(ib + 1) * k * n];
                let c_blk = &mut out[o * m * n..(o + 1) * m * n];
                if trans_b {
                    gemm_nt(a_blk, b_blk, c_blk, m, k, n);
                } else {
                    gemm_nn(a_blk, b_blk, c_blk, m, k, n);
                }
            }
            let mut shape = batch;
            shape.extend_from_slice(&[m, n]);
            (Tensor::new(shape, out)?, m, k, n, pairs)
        };
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
                pairs,
            },
            rg,
        )
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::invalid(
                "elementwise",
                format!("{op:?} takes {arity} operand(s), got {}", args.len()),
            ));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Gelu => self.gelu(args[0]),
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Log => self.log(args[0]),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn binary(&self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (value, bcast) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let bcast = if ta.shape() == tb.shape() {
                Broadcast::Same
            } else if repeats_into(tb.shape(), ta.shape()) {
                Broadcast::RhsRepeats
            } else if repeats_into(ta.shape(), tb.shape()) {
                Broadcast::LhsRepeats
            } else {
                return Err(Error::shape(binary_name(kind), ta.shape(), tb.shape()));
            };
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            };
            let (da, db) = (ta.data(), tb.data());
            let (shape, data): (Vec<usize>, Vec<f64>) = match bcast {
                Broadcast::Same => (ta.shape().to_vec(), da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()),
                Broadcast::RhsRepeats => {
                    let p = db.len();
                    (ta.shape().to_vec(), da.iter().enumerate().map(|(i, &x)| f(x, db[i % p])).collect())
                }
                Broadcast::LhsRepeats => {
                    let p = da.len();
                    (tb.shape().to_vec(), db.iter().enumerate().map(|(i, &y)| f(da[i % p], y)).collect())
                }
            };
            (Tensor::new(shape, data)?, bcast)
        };
        let rg = self.rg(&[a, b]);
        self.push(binary_name(kind), value, Op::Binary { a, b, kind, bcast }, rg)
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?
        };
        let rg = self.rg(&[x]);
        self.push("scale", value, Op::Scale { x, c }, rg)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("log", "argument must be strictly positive"));
        }
        self.unary(x, UnaryKind::Log)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Neg)
    }

    fn unary(&self, x: Var, kind: UnaryKind) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let f: fn(f64) -> f64 = match kind {
                UnaryKind::Sigmoid => sigmoid,
                UnaryKind::Gelu => gelu,
                UnaryKind::Exp => f64::exp,
                UnaryKind::Log => f64::ln,
                UnaryKind::Tanh => f64::tanh,
                UnaryKind::Neg => |v| -v,
            };
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?
        };
        let rg = self.rg(&[x]);
        self.push(unary_name(kind), value, Op::Unary { x, kind }, rg)
    }

    // ---- normalization -----------------------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    /// Softmax over the last axis of `[.., q, k]` scores where query `i`
    /// may only attend to keys `j <= i + (k - q)`.
    pub fn softmax_causal(&self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::invalid("softmax_causal", "needs at least rank 2"));
        }
        self.softmax_impl(x, rank - 1, true)
    }

    fn softmax_impl(&self, x: Var, axis: usize, causal: bool) -> Result<Var> {
        let (value, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
            }
            let (outer, len, inner) = split_axis(shape, axis);
            let q = if causal { shape[shape.len() - 2] } else { 0 };
            let mut out = vec![0.0; t.len()];
            let d = t.data();
            for o in 0..outer {
                // causal rows: key window [0, limit)
                let limit = if causal { (o % q) + 1 + (len - q.min(len)) } else { len };
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..limit).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..limit {
                        let e = (d[at(j)] - max).exp();
                        out[at(j)] = e;
                        z += e;
                    }
                    for j in 0..limit {
                        out[at(j)] /= z;
                    }
                }
            }
            (Tensor::new(shape.to_vec(), out)?, outer, len, inner)
        };
        let rg = self.rg(&[x]);
        self.push("softmax", value, Op::Softmax { x, outer, len, inner }, rg)
    }

    /// Per-row normalization over the last dimension, then `gain * xhat + bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (t, g, b) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let d = *t.shape().last().unwrap();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::shape("layer_norm", t.shape(), g.shape()));
            }
            let rows = t.len() / d;
            let mut out = vec![0.0; t.len()];
            let mut xhat = vec![0.0; t.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &t.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = s;
                for j in 0..d {
                    let h = (row[j] - mean) * s;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(t.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    // ---- structure ---------------------------------------------------

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let (value, outer, chunks) = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut out_shape = first.clone();
            out_shape[axis] = 0;
            for v in xs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &first, s));
                }
                out_shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&first, axis);
            let chunks: Vec<usize> = xs.iter().map(|v| nodes[v.0].value.shape()[axis] * inner).collect();
            let mut out = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for (v, &c) in xs.iter().zip(&chunks) {
                    out.extend_from_slice(&nodes[v.0].value.data()[o * c..(o + 1) * c]);
                }
            }
            (Tensor::new(out_shape, out)?, outer, chunks)
        };
        let rg = self.rg(xs);
        self.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                chunks,
            },
            rg,
        )
    }

    /// Flat gather: output element `i` is `x.data[idx[i]]`, laid out as `shape`.
    pub fn take(&self, x: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != idx.len() {
            return Err(Error::invalid("take", format!("{} indices for shape {shape:?}", idx.len())));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.data();
            if let Some(&bad) = idx.iter().find(|&&i| i >= d.len()) {
                return Err(Error::invalid("take", format!("index {bad} out of bounds for {}", d.len())));
            }
            Tensor::new(shape.to_vec(), idx.iter().map(|&i| d[i]).collect())?
        };
        let rg = self.rg(&[x]);
        self.push("take", value, Op::Take { x, idx }, rg)
    }

    /// Rows of a rank-2 table, e.g. an embedding lookup.
    pub fn gather_rows(&self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::invalid("gather_rows", format!("table must be rank 2, got {shape:?}")));
        }
        let w = shape[1];
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range {}", shape[0])));
        }
        let idx: Arc<[usize]> = rows.iter().flat_map(|&r| (r * w)..(r * w + w)).collect();
        self.take(table, idx, &[rows.len(), w])
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("bad axes {axes:?} for {shape:?}")));
        }
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let n = numel(&shape);
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..n {
            idx.push(counter.iter().zip(axes).map(|(&c, &a)| c * strides[a]).sum());
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.take(x, idx.into(), &out_shape)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid("narrow", format!("[{start}, {start}+{len}) on axis {axis} of {shape:?}")));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            idx.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.take(x, idx.into(), &out_shape)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, Op::Reshape { x }, rg)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push("sum", value, Op::Sum { x }, rg)
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`; `mean_axis(x[n, d], 0)` is token mean-pooling.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let (value, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(Error::invalid("reduce", format!("axis {axis} out of range for {shape:?}")));
            }
            let (outer, len, inner) = split_axis(shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut out_shape: Vec<usize> = shape.to_vec();
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            (Tensor::new(out_shape, out)?, outer, len, inner)
        };
        let rg = self.rg(&[x]);
        self.push(
            "reduce",
            value,
            Op::ReduceAxis {
                x,
                outer,
                len,
                inner,
                mean,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[t, v]`, over the rows where `mask` is set.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (value, probs, count) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            if t.rank() != 2 || targets.len() != t.shape()[0] || mask.len() != t.shape()[0] {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("logits {:?} vs {} targets / {} mask entries", t.shape(), targets.len(), mask.len()),
                ));
            }
            let v = t.shape()[1];
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::invalid("cross_entropy", "empty loss mask"));
            }
            let mut probs = vec![0.0; t.len()];
            let mut total = 0.0;
            for (r, (&target, &on)) in targets.iter().zip(mask).enumerate() {
                if !on {
                    continue;
                }
                if target >= v {
                    return Err(Error::invalid("cross_entropy", format!("target {target} >= vocab {v}")));
                }
                let row = t.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                let log_z = max + z.ln();
                total += log_z - row[target];
                for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x - log_z).exp();
                }
            }
            (Tensor::scalar(total / count as f64), probs, count)
        };
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates d`out`/d(node) for every node that requires a gradient.
    /// `out` must hold a single value.
    pub fn backward(&self, out: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.len() != 1 {
            return Err(Error::invalid("backward", format!("output must be scalar, got {:?}", nodes[out.0].value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Tensor::new(shape, g.clone()).ok()
    }

    fn backprop(&self, nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
                pairs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let da = nodes[a.0].value.data();
                let db = nodes[b.0].value.data();
                if wants(*a) {
                    let ga = slot(grads, *a, da.len());
                    for (o, &(ia, ib)) in pairs.iter().enumerate() {
                        let gc = &g[o * m * n..(o + 1) * m * n];
                        let b_blk = &db[ib * k * n..(ib + 1) * k * n];
                        let ga_blk = &mut ga[ia * m * k..(ia + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gc, b_blk, ga_blk, m, n, k);
                        } else {
                            gemm_nt(gc, b_blk, ga_blk, m, n, k);
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, db.len());
                    for (o, &(ia, ib)) in pairs.iter().enumerate() {
                        let gc = &g[o * m * n..(o + 1) * m * n];
                        let a_blk = &da[ia * m * k..(ia + 1) * m * k];
                        let gb_blk = &mut gb[ib * k * n..(ib + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gc, a_blk, gb_blk, m, n, k);
                        } else {
                            gemm_tn(a_blk, gc, gb_blk, m, k, n);
                        }
                    }
                }
            }
            Op::Binary { a, b, kind, bcast } => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                let (pa, pb) = (va.len(), vb.len());
                let ia = |i: usize| if *bcast == Broadcast::LhsRepeats { i % pa } else { i };
                let ib = |i: usize| if *bcast == Broadcast::RhsRepeats { i % pb } else { i };
                if wants(*a) {
                    let ga = slot(grads, *a, pa);
                    for (i, gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gi,
                            BinaryKind::Mul => gi * vb[ib(i)],
                        };
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, pb);
                    for (i, gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * va[ia(i)],
                        };
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
            }
            Op::Unary { x, kind } => {
                let xv = nodes[x.0].value.data();
                let yv = node.value.data();
                let gelu_scale = match self.fault {
                    Some(Fault::GeluBackwardScale(s)) => s,
                    None => 1.0,
                };
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Sigmoid => yv[i] * (1.0 - yv[i]),
                        UnaryKind::Gelu => gelu_grad(xv[i]) * gelu_scale,
                        UnaryKind::Exp => yv[i],
                        UnaryKind::Log => 1.0 / xv[i],
                        UnaryKind::Tanh => 1.0 - yv[i] * yv[i],
                        UnaryKind::Neg => -1.0,
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let gx = slot(grads, *x, g.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..*len).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                if wants(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % d] += gi * xhat[i];
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, d);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (r, &s) in rstd.iter().enumerate() {
                        let rows = r * d..(r + 1) * d;
                        let dh: Vec<f64> = g[rows.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let h = &xhat[rows.clone()];
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += s * (dh[j] - mean_dh - h[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Concat { xs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (v, &c) in xs.iter().zip(chunks) {
                    if wants(*v) {
                        let gx = slot(grads, *v, outer * c);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            gx[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += c;
                }
            }
            Op::Take { x, idx } => {
                let n = nodes[x.0].value.len();
                let gx = slot(grads, *x, n);
                for (gi, &i) in g.iter().zip(idx.iter()) {
                    gx[i] += gi;
                }
            }
            Op::Reshape { x } => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Sum { x } => {
                let n = nodes[x.0].value.len();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::ReduceAxis {
                x,
                outer,
                len,
                inner,
                mean,
            } => {
                let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
                let gx = slot(grads, *x, outer * len * inner);
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            gx[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.shape()[1];
                let scale = g[0] / *count as f64;
                let gx = slot(grads, *logits, probs.len());
                for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gx[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
    }
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::Gelu => "gelu",
        UnaryKind::Exp => "exp",
        UnaryKind::Log => "log",
        UnaryKind::Tanh => "tanh",
        UnaryKind::Neg => "neg",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// `small` can be tiled to fill `large`: a single value, or a shape suffix.
fn repeats_into(small: &[usize], large: &[usize]) -> bool {
    numel(small) == 1 || (small.len() <= large.len() && large.ends_with(small))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Right-aligned broadcast of batch shapes; returns the output batch shape
/// and, per output batch, the flat batch index into each operand.
fn broadcast_batches(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => out.push(x),
            (1, _) => out.push(y),
            (_, 1) => out.push(x),
            _ => return None,
        }
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total = numel(&out);
    let mut pairs = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        let ia = counter.iter().zip(&sa).map(|(c, s)| c * s).sum();
        let ib = counter.iter().zip(&sb).map(|(c, s)| c * s).sum();
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Some((out, pairs))
}

/// `c[m,n] += a[m,k] @ b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] @ b[n,k]^T`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]^T @ b[m,n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}
