//! Reverse-mode gradient tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value; node indices
//! are therefore a topological order and `backward` walks them in reverse.
//! Leaves created with [`Tape::param`] carry a parameter name and receive a
//! gradient in the returned [`Gradients`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Transpose(usize),
    Pick(usize, Vec<usize>),
    WeightedSum(usize, Vec<f64>),
    SeqAttention {
        q: usize,
        k: usize,
        v: usize,
        lens: Vec<usize>,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentAttention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<(usize, usize)>,
        scale: f64,
        probs: Vec<f64>,
    },
    SegmentLogSoftmax(usize, Vec<(usize, usize)>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | AddConst(a) | Sigmoid(a) | Softplus(a) | Relu(a) | Gelu(a) | Exp(a)
            | Ln(a) | SoftmaxRows(a) | LogSoftmaxRows(a) | Sum(a) | Mean(a) | SumCols(a)
            | GatherRows(a, _) | SliceCols(a, _) | Transpose(a) | Pick(a, _)
            | WeightedSum(a, _) | SegmentLogSoftmax(a, _) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatCols(ps) => ps.clone(),
            SeqAttention { q, k, v, .. } | SegmentAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation. Single-threaded; one tape per step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Gradient for `name`, or zeros shaped like `like` when the parameter
    /// did not take part in the loss.
    pub fn get_or_zeros(&self, name: &str, like: &Tensor) -> Tensor {
        self.grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> ! {
    panic!("{what}: incompatible shapes {:?} and {:?}", a.shape(), b.shape())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&self, name: &str, value: &Tensor) -> Var<'_> {
        self.push(
            value.clone().with_grad(true),
            Op::Leaf {
                param: Some(name.to_string()),
            },
        )
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].idx].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| nodes[p.idx].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = &nodes[p.idx].value;
            assert_eq!(t.rows(), rows, "concat_cols row count");
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        drop(nodes);
        self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(parts.iter().map(|p| p.idx).collect()),
        )
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            for p in node.op.parents() {
                if p >= i {
                    return Err(Error::Internal(format!(
                        "tape cycle: node {i} depends on node {p}"
                    )));
                }
            }
            backprop(&nodes, i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], p: usize) -> &'a mut [f64] {
    let len = nodes[p].value.len();
    grads[p].get_or_insert_with(|| vec![0.0; len])
}

fn backprop(
    nodes: &[Node],
    i: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    out: &mut Gradients,
) {
    let node = &nodes[i];
    let y = &node.value;
    let val = |p: usize| &nodes[p].value;
    match &node.op {
        Op::Leaf { param } => {
            if let Some(name) = param {
                let t = Tensor::new(y.shape().to_vec(), g.to_vec()).expect("leaf grad shape");
                match out.grads.get_mut(name) {
                    Some(prev) => {
                        for (a, b) in prev.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.grads.insert(name.clone(), t);
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k, n) = (val(*a).rows(), val(*a).cols(), val(*b).cols());
            matmul_bt_into(g, val(*b).data(), acc(grads, nodes, *a), m, n, k);
            matmul_at_into(val(*a).data(), g, acc(grads, nodes, *b), m, k, n);
        }
        Op::Add(a, b) => {
            add_into(acc(grads, nodes, *a), g, 1.0);
            add_into(acc(grads, nodes, *b), g, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(acc(grads, nodes, *a), g, 1.0);
            add_into(acc(grads, nodes, *b), g, -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
            let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
            add_into(acc(grads, nodes, *a), &ga, 1.0);
            add_into(acc(grads, nodes, *b), &gb, 1.0);
        }
        Op::AddRow(a, b) => {
            add_into(acc(grads, nodes, *a), g, 1.0);
            let c = y.cols();
            let gb = acc(grads, nodes, *b);
            for row in g.chunks(c) {
                add_into(gb, row, 1.0);
            }
        }
        Op::MulCol(a, b) => {
            let c = y.cols();
            let (av, bv) = (val(*a).data(), val(*b).data());
            {
                let ga = acc(grads, nodes, *a);
                for (r, row) in g.chunks(c).enumerate() {
                    for (j, gv) in row.iter().enumerate() {
                        ga[r * c + j] += gv * bv[r];
                    }
                }
            }
            let gb = acc(grads, nodes, *b);
            for (r, row) in g.chunks(c).enumerate() {
                gb[r] += row
                    .iter()
                    .zip(&av[r * c..(r + 1) * c])
                    .map(|(g, a)| g * a)
                    .sum::<f64>();
            }
        }
        Op::Scale(a, k) => add_into(acc(grads, nodes, *a), g, *k),
        Op::AddConst(a) => add_into(acc(grads, nodes, *a), g, 1.0),
        Op::Sigmoid(a) => {
            let d: Vec<f64> = g
                .iter()
                .zip(y.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            add_into(acc(grads, nodes, *a), &d, 1.0);
        }
        Op::Softplus(a) => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| g * ops::sigmoid(*x))
                .collect();
            add_into(acc(grads, nodes, *a), &d, 1.0);
        }
        Op::Relu(a) => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            add_into(acc(grads, nodes, *a), &d, 1.0);
        }
        Op::Gelu(a) => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| g * ops::gelu_grad(*x))
                .collect();
            add_into(acc(grads, nodes, *a), &d, 1.0);
        }
        Op::Exp(a) => {
            let d: Vec<f64> = g.iter().zip(y.data()).map(|(g, e)| g * e).collect();
            add_into(acc(grads, nodes, *a), &d, 1.0);
        }
        Op::Ln(a) => {
            let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            add_into(acc(grads, nodes, *a), &d, 1.0);
        }
        Op::SoftmaxRows(a) => {
            let c = y.cols();
            let ga = acc(grads, nodes, *a);
            for (r, (grow, prow)) in g.chunks(c).zip(y.data().chunks(c)).enumerate() {
                let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                for j in 0..c {
                    ga[r * c + j] += prow[j] * (grow[j] - dot);
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let c = y.cols();
            let ga = acc(grads, nodes, *a);
            for (r, (grow, lrow)) in g.chunks(c).zip(y.data().chunks(c)).enumerate() {
                let s: f64 = grow.iter().sum();
                for j in 0..c {
                    ga[r * c + j] += grow[j] - lrow[j].exp() * s;
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = y.cols();
            let gam = val(*gamma).data().to_vec();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; g.len()];
            for (r, grow) in g.chunks(c).enumerate() {
                let xh = &xhat[r * c..(r + 1) * c];
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                let dxhat: Vec<f64> = (0..c)
                    .map(|j| {
                        dgamma[j] += grow[j] * xh[j];
                        dbeta[j] += grow[j];
                        let v = grow[j] * gam[j];
                        sum_d += v;
                        sum_dx += v * xh[j];
                        v
                    })
                    .collect();
                let n = c as f64;
                for j in 0..c {
                    dx[r * c + j] = inv_std[r] / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                }
            }
            add_into(acc(grads, nodes, *x), &dx, 1.0);
            add_into(acc(grads, nodes, *gamma), &dgamma, 1.0);
            add_into(acc(grads, nodes, *beta), &dbeta, 1.0);
        }
        Op::Sum(a) => {
            let ga = acc(grads, nodes, *a);
            for v in ga.iter_mut() {
                *v += g[0];
            }
        }
        Op::Mean(a) => {
            let ga = acc(grads, nodes, *a);
            let k = g[0] / ga.len() as f64;
            for v in ga.iter_mut() {
                *v += k;
            }
        }
        Op::SumCols(a) => {
            let c = val(*a).cols();
            let ga = acc(grads, nodes, *a);
            for (r, gv) in g.iter().enumerate() {
                for v in &mut ga[r * c..(r + 1) * c] {
                    *v += gv;
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let c = y.cols();
            let ga = acc(grads, nodes, *a);
            for (r, &src) in idx.iter().enumerate() {
                add_into(&mut ga[src * c..(src + 1) * c], &g[r * c..(r + 1) * c], 1.0);
            }
        }
        Op::ConcatCols(parts) => {
            let total = y.cols();
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                let gp = acc(grads, nodes, p);
                for r in 0..y.rows() {
                    add_into(
                        &mut gp[r * w..(r + 1) * w],
                        &g[r * total + off..r * total + off + w],
                        1.0,
                    );
                }
                off += w;
            }
        }
        Op::SliceCols(a, start) => {
            let (w, c) = (y.cols(), val(*a).cols());
            let ga = acc(grads, nodes, *a);
            for r in 0..y.rows() {
                add_into(
                    &mut ga[r * c + start..r * c + start + w],
                    &g[r * w..(r + 1) * w],
                    1.0,
                );
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (y.rows(), y.cols());
            let ga = acc(grads, nodes, *a);
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] += g[i * c + j];
                }
            }
        }
        Op::Pick(a, idx) => {
            let c = val(*a).cols();
            let ga = acc(grads, nodes, *a);
            for (r, &j) in idx.iter().enumerate() {
                ga[r * c + j] += g[r];
            }
        }
        Op::WeightedSum(a, w) => add_into(acc(grads, nodes, *a), w, g[0]),
        Op::SeqAttention {
            q,
            k,
            v,
            lens,
            seq_len,
            heads,
            probs,
        } => {
            let d = y.cols();
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
            let t = *seq_len;
            let mut dq = vec![0.0; qv.len()];
            let mut dk = vec![0.0; kv.len()];
            let mut dv = vec![0.0; vv.len()];
            let mut dp = vec![0.0; t];
            for (b, &len) in lens.iter().enumerate() {
                for h in 0..*heads {
                    let c0 = h * dh;
                    for i in 0..t {
                        let qi = (b * t + i) * d + c0;
                        let prow = &probs[((b * heads + h) * t + i) * t..][..len];
                        let mut dot = 0.0;
                        for j in 0..len {
                            let vj = (b * t + j) * d + c0;
                            let mut s = 0.0;
                            for c in 0..dh {
                                s += g[qi + c] * vv[vj + c];
                                dv[vj + c] += prow[j] * g[qi + c];
                            }
                            dp[j] = s;
                            dot += s * prow[j];
                        }
                        for j in 0..len {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            let kj = (b * t + j) * d + c0;
                            for c in 0..dh {
                                dq[qi + c] += ds * kv[kj + c];
                                dk[kj + c] += ds * qv[qi + c];
                            }
                        }
                    }
                }
            }
            add_into(acc(grads, nodes, *q), &dq, 1.0);
            add_into(acc(grads, nodes, *k), &dk, 1.0);
            add_into(acc(grads, nodes, *v), &dv, 1.0);
        }
        Op::SegmentAttention {
            q,
            k,
            v,
            segments,
            scale,
            probs,
        } => {
            let (qt, kt, vt) = (val(*q), val(*k), val(*v));
            let (dk_w, dv_w) = (qt.cols(), vt.cols());
            let mut dq = vec![0.0; qt.len()];
            let mut dkk = vec![0.0; kt.len()];
            let mut dvv = vec![0.0; vt.len()];
            let mut off = 0;
            for (s, &(start, len)) in segments.iter().enumerate() {
                let prow = &probs[off..off + len];
                off += len;
                let grow = &g[s * dv_w..(s + 1) * dv_w];
                let mut dp = vec![0.0; len];
                let mut dot = 0.0;
                for j in 0..len {
                    let vrow = vt.row(start + j);
                    let mut acc_s = 0.0;
                    for c in 0..dv_w {
                        acc_s += grow[c] * vrow[c];
                        dvv[(start + j) * dv_w + c] += prow[j] * grow[c];
                    }
                    dp[j] = acc_s;
                    dot += acc_s * prow[j];
                }
                let qrow = qt.row(s);
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let krow = kt.row(start + j);
                    for c in 0..dk_w {
                        dq[s * dk_w + c] += ds * krow[c];
                        dkk[(start + j) * dk_w + c] += ds * qrow[c];
                    }
                }
            }
            add_into(acc(grads, nodes, *q), &dq, 1.0);
            add_into(acc(grads, nodes, *k), &dkk, 1.0);
            add_into(acc(grads, nodes, *v), &dvv, 1.0);
        }
        Op::SegmentLogSoftmax(a, segments) => {
            let ga = acc(grads, nodes, *a);
            for &(start, len) in segments {
                let s: f64 = g[start..start + len].iter().sum();
                for r in start..start + len {
                    ga[r] += g[r] - y.data()[r].exp() * s;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn rows(&self) -> usize {
        self.with_value(|t| t.rows())
    }

    pub fn cols(&self) -> usize {
        self.with_value(|t| t.cols())
    }

    fn unary(&self, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let v = self.with_value(f);
        self.tape.push(v, op)
    }

    fn binary(&self, other: Var<'t>, f: impl Fn(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.idx].value, &nodes[other.idx].value)
        };
        self.tape.push(v, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| {
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if k != b.rows() {
                    shape_err("matmul", a, b);
                }
                let mut out = vec![0.0; m * n];
                matmul_into(a.data(), b.data(), &mut out, m, k, n);
                Tensor::matrix(m, n, out)
            },
            Op::MatMul(self.idx, other.idx),
        )
    }

    fn zip(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if !a.same_shape(b) {
            shape_err(what, a, b);
        }
        Tensor::matrix(
            a.rows(),
            a.cols(),
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| Self::zip(a, b, "add", |x, y| x + y),
            Op::Add(self.idx, other.idx),
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| Self::zip(a, b, "sub", |x, y| x - y),
            Op::Sub(self.idx, other.idx),
        )
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| Self::zip(a, b, "mul", |x, y| x * y),
            Op::Mul(self.idx, other.idx),
        )
    }

    /// `self[r×c] + row[1×c]` broadcast over rows.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(
            row,
            |a, b| {
                if b.rows() != 1 || b.cols() != a.cols() {
                    shape_err("add_row", a, b);
                }
                let c = a.cols();
                let mut out = a.data().to_vec();
                for chunk in out.chunks_mut(c) {
                    for (o, v) in chunk.iter_mut().zip(b.data()) {
                        *o += v;
                    }
                }
                Tensor::matrix(a.rows(), c, out)
            },
            Op::AddRow(self.idx, row.idx),
        )
    }

    /// `self[r×c] * col[r×1]` broadcast over columns.
    pub fn mul_col(&self, col: Var<'t>) -> Var<'t> {
        self.binary(
            col,
            |a, b| {
                if b.cols() != 1 || b.rows() != a.rows() {
                    shape_err("mul_col", a, b);
                }
                let c = a.cols();
                let mut out = a.data().to_vec();
                for (r, chunk) in out.chunks_mut(c.max(1)).enumerate() {
                    for o in chunk.iter_mut() {
                        *o *= b.data()[r];
                    }
                }
                Tensor::matrix(a.rows(), c, out)
            },
            Op::MulCol(self.idx, col.idx),
        )
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v * k), Op::Scale(self.idx, k))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds a constant tensor of the same shape (no gradient to the constant).
    pub fn add_const(&self, c: &Tensor) -> Var<'t> {
        self.unary(
            |a| Self::zip(a, c, "add_const", |x, y| x + y),
            Op::AddConst(self.idx),
        )
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v + k), Op::AddConst(self.idx))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|a| a.map(ops::sigmoid), Op::Sigmoid(self.idx))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(|a| a.map(ops::softplus), Op::Softplus(self.idx))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|a| a.map(|v| v.max(0.0)), Op::Relu(self.idx))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(|a| a.map(ops::gelu), Op::Gelu(self.idx))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(|a| a.map(f64::exp), Op::Exp(self.idx))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(|a| a.map(f64::ln), Op::Ln(self.idx))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        self.unary(ops::softmax_rows, Op::SoftmaxRows(self.idx))
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        self.unary(
            |a| {
                let mut out = a.clone();
                for r in 0..out.rows() {
                    ops::log_softmax_in_place(out.row_mut(r));
                }
                out
            },
            Op::LogSoftmaxRows(self.idx),
        )
    }

    /// Row-wise layer normalisation with gain and bias rows.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let (gm, bt) = (&nodes[gamma.idx].value, &nodes[beta.idx].value);
            let (r, c) = (x.rows(), x.cols());
            assert!(gm.cols() == c && bt.cols() == c, "layer_norm width");
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = x.row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * gm.data()[j] + bt.data()[j];
                }
            }
            (Tensor::matrix(r, c, out), xhat, inv_std)
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
        )
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(|a| Tensor::scalar(a.sum()), Op::Sum(self.idx))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(
            |a| Tensor::scalar(a.sum() / a.len().max(1) as f64),
            Op::Mean(self.idx),
        )
    }

    /// Per-row sums as an `r × 1` column.
    pub fn sum_cols(&self) -> Var<'t> {
        self.unary(
            |a| Tensor::column((0..a.rows()).map(|r| a.row(r).iter().sum()).collect()),
            Op::SumCols(self.idx),
        )
    }

    /// Row lookup (embedding gather). Indices may repeat.
    pub fn gather_rows(&self, idx: Vec<usize>) -> Var<'t> {
        let v = self.with_value(|a| a.select_rows(&idx));
        self.tape.push(v, Op::GatherRows(self.idx, idx))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Var<'t> {
        let v = self.with_value(|a| {
            let c = a.cols();
            let mut out = Vec::with_capacity(a.rows() * width);
            for r in 0..a.rows() {
                out.extend_from_slice(&a.data()[r * c + start..r * c + start + width]);
            }
            Tensor::matrix(a.rows(), width, out)
        });
        self.tape.push(v, Op::SliceCols(self.idx, start))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Tensor::transpose, Op::Transpose(self.idx))
    }

    /// `out[r] = self[r, idx[r]]`, an `r × 1` column.
    pub fn pick(&self, idx: Vec<usize>) -> Var<'t> {
        let v = self.with_value(|a| {
            Tensor::column(idx.iter().enumerate().map(|(r, &j)| a.get(r, j)).collect())
        });
        self.tape.push(v, Op::Pick(self.idx, idx))
    }

    /// `Σ w_i · self_i` over the flattened data, against constant weights.
    pub fn weighted_sum(&self, w: Vec<f64>) -> Var<'t> {
        let v = self.with_value(|a| {
            assert_eq!(a.len(), w.len(), "weighted_sum length");
            Tensor::scalar(a.data().iter().zip(&w).map(|(x, y)| x * y).sum())
        });
        self.tape.push(v, Op::WeightedSum(self.idx, w))
    }

    /// Multi-head self attention over a batch of padded sequences stacked as
    /// `[batch·seq_len × d]`. Keys past each sequence's length are masked.
    pub fn seq_attention(
        &self,
        k: Var<'t>,
        v: Var<'t>,
        lens: Vec<usize>,
        seq_len: usize,
        heads: usize,
    ) -> Var<'t> {
        let (value, probs) = {
            let nodes = self.tape.nodes.borrow();
            let (qt, kt, vt) = (
                &nodes[self.idx].value,
                &nodes[k.idx].value,
                &nodes[v.idx].value,
            );
            let d = qt.cols();
            assert!(d % heads == 0, "heads must divide width");
            assert_eq!(qt.rows(), lens.len() * seq_len, "seq_attention rows");
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let t = seq_len;
            let mut probs = vec![0.0; lens.len() * heads * t * t];
            let mut out = vec![0.0; qt.len()];
            let (qv, kv, vv) = (qt.data(), kt.data(), vt.data());
            for (b, &len) in lens.iter().enumerate() {
                assert!(len >= 1 && len <= t, "sequence length out of range");
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..t {
                        let qi = (b * t + i) * d + c0;
                        let prow = &mut probs[((b * heads + h) * t + i) * t..][..len];
                        for (j, p) in prow.iter_mut().enumerate() {
                            let kj = (b * t + j) * d + c0;
                            let mut s = 0.0;
                            for c in 0..dh {
                                s += qv[qi + c] * kv[kj + c];
                            }
                            *p = s * scale;
                        }
                        ops::softmax_in_place(prow);
                        for (j, p) in prow.iter().enumerate() {
                            let vj = (b * t + j) * d + c0;
                            for c in 0..dh {
                                out[qi + c] += p * vv[vj + c];
                            }
                        }
                    }
                }
            }
            (Tensor::matrix(qt.rows(), d, out), probs)
        };
        self.tape.push(
            value,
            Op::SeqAttention {
                q: self.idx,
                k: k.idx,
                v: v.idx,
                lens,
                seq_len,
                heads,
                probs,
            },
        )
    }

    /// One attention query per segment: row `s` of `self` attends over rows
    /// `start..start+len` of `k` and `v`. Empty segments produce a zero row.
    pub fn segment_attention(
        &self,
        k: Var<'t>,
        v: Var<'t>,
        segments: Vec<(usize, usize)>,
        scale: f64,
    ) -> Var<'t> {
        let (value, probs) = {
            let nodes = self.tape.nodes.borrow();
            let (qt, kt, vt) = (
                &nodes[self.idx].value,
                &nodes[k.idx].value,
                &nodes[v.idx].value,
            );
            assert_eq!(qt.rows(), segments.len(), "one query per segment");
            assert_eq!(qt.cols(), kt.cols(), "query/key width");
            assert_eq!(kt.rows(), vt.rows(), "key/value rows");
            let dv = vt.cols();
            let mut probs = Vec::new();
            let mut out = vec![0.0; segments.len() * dv];
            for (s, &(start, len)) in segments.iter().enumerate() {
                let base = probs.len();
                let qrow = qt.row(s);
                for j in 0..len {
                    let krow = kt.row(start + j);
                    probs.push(qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale);
                }
                if len == 0 {
                    continue;
                }
                ops::softmax_in_place(&mut probs[base..]);
                for j in 0..len {
                    let p = probs[base + j];
                    for (o, x) in out[s * dv..(s + 1) * dv].iter_mut().zip(vt.row(start + j)) {
                        *o += p * x;
                    }
                }
            }
            (Tensor::matrix(segments.len(), dv, out), probs)
        };
        self.tape.push(
            value,
            Op::SegmentAttention {
                q: self.idx,
                k: k.idx,
                v: v.idx,
                segments,
                scale,
                probs,
            },
        )
    }

    /// Log-softmax of an `n × 1` column within each `(start, len)` segment.
    /// Rows outside every segment are passed through as zero.
    pub fn segment_log_softmax(&self, segments: Vec<(usize, usize)>) -> Var<'t> {
        let v = self.with_value(|a| {
            let mut out = vec![0.0; a.len()];
            for &(start, len) in &segments {
                out[start..start + len].copy_from_slice(&a.data()[start..start + len]);
                ops::log_softmax_in_place(&mut out[start..start + len]);
            }
            Tensor::column(out)
        });
        self.tape.push(v, Op::SegmentLogSoftmax(self.idx, segments))
    }
}
