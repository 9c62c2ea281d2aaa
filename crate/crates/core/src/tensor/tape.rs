use std::cell::RefCell;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

/// Stand-in for `-inf` in log-space recursions. Keeps every value finite
/// while contributing exactly zero probability mass to a log-add.
pub const NEG_LARGE: f64 = -1.0e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Concat(Vec<usize>),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        input: usize,
        indices: Vec<usize>,
    },
    Mean {
        input: usize,
        axis: usize,
    },
    Sum(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    LogSoftmax(usize),
    LogAddExp(usize, usize),
    Conv1d {
        input: usize,
        weight: usize,
        stride: usize,
    },
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Mean { .. } => "mean",
            Op::Sum(..) => "sum",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogAddExp(..) => "logaddexp",
            Op::Conv1d { .. } => "conv1d",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Append-only record of a computation.
///
/// A tape is confined to one thread. Inference tapes (see
/// [`Tape::inference`]) keep forward values only and refuse `backward`.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Number of nodes that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that evaluates forward values without recording the graph.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf (parameter, input or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    /// Sinusoidal position table of shape `[rows, dim]`:
    /// even columns `sin(pos / 10000^(2i/dim))`, odd columns the matching `cos`.
    pub fn position_table(&self, rows: usize, dim: usize) -> Var<'_> {
        self.leaf(position_table(rows, dim))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let op = if self.record { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn owns(&self, var: Var<'_>) -> bool {
        std::ptr::eq(self, var.tape) && var.id < self.len()
    }

    /// Scans every recorded value; reports the first non-finite one.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.borrow().iter().enumerate() {
            if !node.value.is_finite() {
                return Err(TensorError::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root. Fan-out contributions are summed.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !self.record {
            return Err(TensorError::NotRecording);
        }
        if !self.owns(root) {
            return Err(TensorError::ForeignNode);
        }
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.numel() != 1 {
            return Err(TensorError::NotScalar(root_val.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *x, &g);
                    let cols = out.cols();
                    let mut gr = vec![0.0; cols];
                    for r in g.chunks(cols) {
                        for (acc, v) in gr.iter_mut().zip(r) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *row, &gr);
                }
                Op::MatMul(a, b) => {
                    let (at, bt) = (val(*a), val(*b));
                    let (m, k) = (at.shape()[0], at.shape()[1]);
                    let n = bt.shape()[1];
                    let (ad, bd) = (at.data(), bt.data());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + p] = s;
                            let aip = ad[i * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                gbrow[j] += aip * grow[j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    // out is [r, c]; input is [c, r]
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] = g[i * c + j];
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Concat(inputs) => {
                    let total = out.cols();
                    let rows = out.rows();
                    let mut offset = 0;
                    for &inp in inputs {
                        let w = val(inp).cols();
                        let mut gi = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gi.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, inp, &gi);
                        offset += w;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let it = val(*input);
                    let (outer, n_in, inner) = split_axis(it.shape(), *axis);
                    let n_out = out.shape()[*axis];
                    let mut gi = vec![0.0; it.numel()];
                    for o in 0..outer {
                        let src = &g[o * n_out * inner..(o + 1) * n_out * inner];
                        let dst_start = (o * n_in + start) * inner;
                        gi[dst_start..dst_start + n_out * inner].copy_from_slice(src);
                    }
                    accumulate(&mut grads, *input, &gi);
                }
                Op::Gather { input, indices } => {
                    let it = val(*input);
                    let cols = it.cols();
                    let n = indices.len();
                    let mut gi = vec![0.0; it.numel()];
                    for r in 0..it.rows() {
                        for (j, &idx) in indices.iter().enumerate() {
                            gi[r * cols + idx] += g[r * n + j];
                        }
                    }
                    accumulate(&mut grads, *input, &gi);
                }
                Op::Mean { input, axis } => {
                    let it = val(*input);
                    let (outer, n, inner) = split_axis(it.shape(), *axis);
                    let inv = 1.0 / n as f64;
                    let mut gi = vec![0.0; it.numel()];
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                gi[(o * n + k) * inner + j] = g[o * inner + j] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, &gi);
                }
                Op::Sum(a) => {
                    let gi = vec![g[0]; val(*a).numel()];
                    accumulate(&mut grads, *a, &gi);
                }
                Op::Exp(a) => {
                    let gi: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *a, &gi);
                }
                Op::Log(a) => {
                    let gi: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                    accumulate(&mut grads, *a, &gi);
                }
                Op::Tanh(a) => {
                    let gi: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, *a, &gi);
                }
                Op::Relu(a) => {
                    let gi: Vec<f64> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, &gi);
                }
                Op::Softplus(a) => {
                    let gi: Vec<f64> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, x)| g * sigmoid(*x))
                        .collect();
                    accumulate(&mut grads, *a, &gi);
                }
                Op::Sigmoid(a) => {
                    let gi: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *a, &gi);
                }
                Op::LogSoftmax(a) => {
                    let cols = out.cols();
                    let mut gi = vec![0.0; out.numel()];
                    for ((gr, yr), dst) in g
                        .chunks(cols)
                        .zip(out.data().chunks(cols))
                        .zip(gi.chunks_mut(cols))
                    {
                        let total: f64 = gr.iter().sum();
                        for j in 0..cols {
                            dst[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, &gi);
                }
                Op::LogAddExp(a, b) => {
                    let (ad, bd) = (val(*a).data(), val(*b).data());
                    let y = out.data();
                    let ga: Vec<f64> = (0..g.len()).map(|i| g[i] * (ad[i] - y[i]).exp()).collect();
                    let gb: Vec<f64> = (0..g.len()).map(|i| g[i] * (bd[i] - y[i]).exp()).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Conv1d {
                    input,
                    weight,
                    stride,
                } => {
                    let (xt, wt) = (val(*input), val(*weight));
                    let (kernel, cin, cout) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
                    let span = kernel * cin;
                    let (xd, wd) = (xt.data(), wt.data());
                    let mut gx = vec![0.0; xt.numel()];
                    let mut gw = vec![0.0; wt.numel()];
                    for t in 0..out.shape()[0] {
                        let base = t * stride * cin;
                        let window = &xd[base..base + span];
                        let grow = &g[t * cout..(t + 1) * cout];
                        let gxw = &mut gx[base..base + span];
                        for kc in 0..span {
                            let wrow = &wd[kc * cout..(kc + 1) * cout];
                            let gwrow = &mut gw[kc * cout..(kc + 1) * cout];
                            let xv = window[kc];
                            let mut s = 0.0;
                            for o in 0..cout {
                                s += wrow[o] * grow[o];
                                gwrow[o] += xv * grow[o];
                            }
                            gxw[kc] += s;
                        }
                    }
                    accumulate(&mut grads, *input, &gx);
                    accumulate(&mut grads, *weight, &gw);
                }
                Op::LayerNorm { input, gamma, beta } => {
                    let xt = val(*input);
                    let gm = val(*gamma).data();
                    let d = xt.cols();
                    let mut gx = vec![0.0; xt.numel()];
                    let mut ggamma = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..xt.rows() {
                        let x = xt.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let (mean, rstd) = moments(x);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            xhat[j] = (x[j] - mean) * rstd;
                            dxhat[j] = gr[j] * gm[j];
                            ggamma[j] += gr[j] * xhat[j];
                            gbeta[j] += gr[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    accumulate(&mut grads, *input, &gx);
                    accumulate(&mut grads, *gamma, &ggamma);
                    accumulate(&mut grads, *beta, &gbeta);
                }
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(nodes[i].value.shape().to_vec(), d).unwrap()))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contrib: &[f64]) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn position_table(rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; rows * dim];
    for pos in 0..rows {
        for i in 0..dim {
            let pair = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![rows, dim], data).expect("positive table shape")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn check_tape(&self, other: Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::InvalidShape {
                op,
                shape: vec![],
                reason: "operands live on different tapes".into(),
            })
        }
    }

    fn zip_same(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var<'t>> {
        self.check_tape(other, op)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(op, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.tape.push(Tensor::new(a.shape().to_vec(), data)?, node))
    }

    fn map(self, f: impl Fn(f64) -> f64, node: Op) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| f(*x)).collect();
        self.tape
            .push(Tensor::new(a.shape().to_vec(), data).unwrap(), node)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product of equal-shaped operands.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(|x| x * c, Op::Scale(self.id, c))
    }

    /// Adds a `[cols]`-sized row to every row of a matrix (bias add).
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(row, "add_row")?;
        let (x, r) = (self.value(), row.value());
        let cols = x.cols();
        if r.numel() != cols {
            return Err(mismatch("add_row", &x, &r));
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::AddRow(self.id, row.id),
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", &a, &b));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self
            .tape
            .push(Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(invalid("transpose", &a, "expected rank 2"));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self
            .tape
            .push(Tensor::new(vec![c, r], out)?, Op::Transpose(self.id)))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no operands".into(),
        })?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for (p, v) in parts.iter().zip(&values) {
            first.check_tape(*p, "concat")?;
            if &v.shape()[..v.rank() - 1] != lead {
                return Err(mismatch("concat", &values[0], v));
            }
        }
        let rows = values[0].rows();
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(tape.push(
            Tensor::new(shape, data)?,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Contiguous sub-range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() || start >= end || end > a.shape()[axis] {
            return Err(invalid(
                "slice",
                &a,
                format!("range {start}..{end} on axis {axis}"),
            ));
        }
        let (outer, n, inner) = split_axis(a.shape(), axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&a.data()[s..s + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Selects columns of the last axis by index (repeats allowed).
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        if indices.is_empty() || indices.iter().any(|&i| i >= cols) {
            return Err(invalid("gather", &a, format!("indices {indices:?}")));
        }
        let mut data = Vec::with_capacity(a.rows() * indices.len());
        for r in 0..a.rows() {
            let row = a.row(r);
            data.extend(indices.iter().map(|&i| row[i]));
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = indices.len();
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Gather {
                input: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean over `axis`, keeping it as a length-1 dimension.
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(invalid("mean", &a, format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(a.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for j in 0..inner {
                    data[o * inner + j] += a.data()[(o * n + k) * inner + j];
                }
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = 1;
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Mean {
                input: self.id,
                axis,
            },
        ))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t> {
        self.map(f64::ln, Op::Log(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(softplus, Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.tape.push(
            Tensor::new(a.shape().to_vec(), data).unwrap(),
            Op::LogSoftmax(self.id),
        )
    }

    /// Softmax over the last axis, as `exp(log_softmax(x))`.
    pub fn softmax(self) -> Var<'t> {
        self.log_softmax().exp()
    }

    /// Elementwise `ln(e^a + e^b)`.
    pub fn logaddexp(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(
            other,
            "logaddexp",
            log_add_exp,
            Op::LogAddExp(self.id, other.id),
        )
    }

    /// Valid-padding 1-D convolution.
    ///
    /// `self` is `[length, in_channels]`, `weight` is
    /// `[kernel, in_channels, out_channels]`; the result is
    /// `[(length - kernel) / stride + 1, out_channels]`.
    pub fn conv1d(self, weight: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.check_tape(weight, "conv1d")?;
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 2 || w.rank() != 3 || x.shape()[1] != w.shape()[1] {
            return Err(mismatch("conv1d", &x, &w));
        }
        let (len, cin) = (x.shape()[0], x.shape()[1]);
        let (kernel, cout) = (w.shape()[0], w.shape()[2]);
        if stride == 0 {
            return Err(invalid("conv1d", &x, "stride must be positive"));
        }
        if len < kernel {
            return Err(invalid(
                "conv1d",
                &x,
                format!("input length {len} shorter than kernel {kernel}"),
            ));
        }
        let out_len = (len - kernel) / stride + 1;
        let span = kernel * cin;
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![0.0; out_len * cout];
        for t in 0..out_len {
            let base = t * stride * cin;
            let window = &xd[base..base + span];
            let orow = &mut out[t * cout..(t + 1) * cout];
            for kc in 0..span {
                let xv = window[kc];
                let wrow = &wd[kc * cout..(kc + 1) * cout];
                for o in 0..cout {
                    orow[o] += xv * wrow[o];
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![out_len, cout], out)?,
            Op::Conv1d {
                input: self.id,
                weight: weight.id,
                stride,
            },
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(gamma, "layer_norm")?;
        self.check_tape(beta, "layer_norm")?;
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let d = x.cols();
        if gm.numel() != d {
            return Err(mismatch("layer_norm", &x, &gm));
        }
        if bt.numel() != d {
            return Err(mismatch("layer_norm", &x, &bt));
        }
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row = x.row(r);
            let (mean, rstd) = moments(row);
            data.extend(
                row.iter()
                    .zip(gm.data().iter().zip(bt.data()))
                    .map(|(v, (g, b))| (v - mean) * rstd * g + b),
            );
        }
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
        ))
    }
}
