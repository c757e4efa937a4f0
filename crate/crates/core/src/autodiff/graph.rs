//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; node indices are a
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use super::linalg::{matmul, MatRef};
use super::spectral;
use super::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    L1(Var),
    L2(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    StopGradient,
    Spectral {
        x: Var,
        wr: Var,
        wi: Var,
        modes: usize,
    },
    Concat(Var, Var),
    Reshape(Var),
    Row(Var, usize),
    Rows(Var, usize),
    Pick(Var, usize),
    BroadcastRows(Var),
    TimeDiff(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 3] {
        use Op::*;
        match *self {
            Leaf | StopGradient => [None, None, None],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | AddRow(a, b)
            | MulRow(a, b)
            | MatMul(a, b)
            | Concat(a, b) => [Some(a), Some(b), None],
            Conv1d { x, w, .. } => [Some(x), Some(w), None],
            Spectral { x, wr, wi, .. } => [Some(x), Some(wr), Some(wi)],
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | Relu(a)
            | Gelu(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Abs(a)
            | Square(a)
            | Softmax(a)
            | LogSoftmax(a)
            | Sum(a)
            | Mean(a)
            | MeanRows(a)
            | L1(a)
            | L2(a)
            | Reshape(a)
            | Row(a, _)
            | Rows(a, _)
            | Pick(a, _)
            | BroadcastRows(a)
            | TimeDiff(a) => [Some(a), None, None],
            LayerNorm { x, .. } | NormalizeRows { x, .. } => [Some(x), None, None],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            AddRow(..) => "add_row",
            MulRow(..) => "mul_row",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Conv1d { .. } => "conv1d",
            LayerNorm { .. } => "layer_norm",
            Relu(..) => "relu",
            Gelu(..) => "gelu",
            Exp(..) => "exp",
            Log(..) => "log",
            Sqrt(..) => "sqrt",
            Abs(..) => "abs",
            Square(..) => "square",
            Softmax(..) => "softmax",
            LogSoftmax(..) => "log_softmax",
            Sum(..) => "sum",
            Mean(..) => "mean",
            MeanRows(..) => "mean_rows",
            L1(..) => "l1_norm",
            L2(..) => "l2_norm",
            NormalizeRows { .. } => "normalize_rows",
            StopGradient => "stop_gradient",
            Spectral { .. } => "spectral_conv",
            Concat(..) => "concat",
            Reshape(..) => "reshape",
            Row(..) => "row",
            Rows(..) => "rows",
            Pick(..) => "pick",
            BroadcastRows(..) => "broadcast_rows",
            TimeDiff(..) => "time_diff",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        let needs_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::invalid(
                op,
                format!("expected a 2-D tensor, got shape {s:?}"),
            )),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| f(*x)).collect(),
        )?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let op = if mul { "mul_row" } else { "add_row" };
        let cols = self.value(a).cols();
        if self.shape(b) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(
            t,
            if mul {
                Op::MulRow(a, b)
            } else {
                Op::AddRow(a, b)
            },
        )
    }

    /// `a[.., c] + b[c]` for every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, false)
    }

    /// `a[.., c] * b[c]` for every row of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, true)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let va = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a))
    }

    /// 1-D convolution over time. `x` is `[T, C_in]`, `w` is `[K, C_in, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (t, cin) = self.dims2("conv1d", x)?;
        let (k, wcin, cout) = match *self.shape(w) {
            [k, ci, co] => (k, ci, co),
            ref s => {
                return Err(TensorError::invalid(
                    "conv1d",
                    format!("weight must be [K, C_in, C_out], got {s:?}"),
                ))
            }
        };
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![t, cin],
                rhs: vec![k, wcin, cout],
            });
        }
        if stride == 0 || t + 2 * pad < k {
            return Err(TensorError::invalid(
                "conv1d",
                format!("input length {t} with padding {pad} shorter than kernel {k}"),
            ));
        }
        let tout = (t + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let kc = k * cin;
        let mut cols = vec![0.0; tout * kc];
        for to in 0..tout {
            for kk in 0..k {
                let src = (to * stride + kk) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let s = src as usize;
                cols[to * kc + kk * cin..to * kc + (kk + 1) * cin]
                    .copy_from_slice(&xd[s * cin..(s + 1) * cin]);
            }
        }
        let out = matmul(
            MatRef::new(&cols, tout, kc),
            MatRef::new(self.value(w).data(), kc, cout),
        );
        self.push(
            Tensor::new(vec![tout, cout], out)?,
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Normalizes each row (last dimension) to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = Vec::with_capacity(vx.len() / c.max(1));
        for (row, out) in vx.data().chunks(c).zip(xhat.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(vx.shape().to_vec(), xhat.clone())?;
        self.push(t, Op::LayerNorm { x, xhat, rstd })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), |x| gelu_parts(x).0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), |x| x * x)
    }

    fn softmax_rows(data: &[f64], cols: usize, log: bool) -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        for (row, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lz = z.ln();
            for (oi, v) in o.iter_mut().zip(row) {
                *oi = if log { v - m - lz } else { (v - m).exp() / z };
            }
        }
        out
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Self::softmax_rows(va.data(), va.cols(), false);
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Self::softmax_rows(va.data(), va.cols(), true);
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push(t, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over the leading (time) dimension: `[T, C] -> [C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (t, c) = self.dims2("mean_rows", a)?;
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= t as f64;
        }
        self.push(Tensor::vector(out), Op::MeanRows(a))
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1(a))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s = self
            .value(a)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.push(Tensor::scalar(s), Op::L2(a))
    }

    /// Scales each row (last dimension) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.data().to_vec();
        let mut norms = Vec::with_capacity(vx.len() / c.max(1));
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(t, Op::NormalizeRows { x, norms })
    }

    /// Identity in the forward pass; blocks gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient)
    }

    /// Spectral convolution along time: real FFT of each channel of `x`
    /// (`[T, C]`), multiplication of the lowest `modes` frequencies by the
    /// complex weights `wr + i·wi` (each `[modes, C]`), zeroing of the rest,
    /// and inverse real FFT.
    pub fn spectral_conv(&mut self, x: Var, wr: Var, wi: Var, modes: usize) -> Result<Var> {
        let (t, c) = self.dims2("spectral_conv", x)?;
        if modes == 0 || modes > t / 2 + 1 {
            return Err(TensorError::invalid(
                "spectral_conv",
                format!("modes {modes} outside 1..={} for length {t}", t / 2 + 1),
            ));
        }
        for w in [wr, wi] {
            if self.shape(w) != [modes, c] {
                return Err(TensorError::ShapeMismatch {
                    op: "spectral_conv",
                    lhs: vec![modes, c],
                    rhs: self.shape(w).to_vec(),
                });
            }
        }
        let out = spectral::forward(
            self.value(x).data(),
            t,
            c,
            self.value(wr).data(),
            self.value(wi).data(),
            modes,
        );
        self.push(
            Tensor::new(vec![t, c], out)?,
            Op::Spectral { x, wr, wi, modes },
        )
    }

    /// Concatenates two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(b).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut d = self.value(a).data().to_vec();
        d.extend_from_slice(self.value(b).data());
        self.push(Tensor::vector(d), Op::Concat(a, b))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(a))
    }

    /// Row `i` of a 2-D tensor, as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (r, c) = self.dims2("row", a)?;
        if i >= r {
            return Err(TensorError::invalid("row", format!("row {i} of {r}")));
        }
        let d = self.value(a).data()[i * c..(i + 1) * c].to_vec();
        self.push(Tensor::vector(d), Op::Row(a, i))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("rows", a)?;
        if start >= end || end > r {
            return Err(TensorError::invalid(
                "rows",
                format!("rows {start}..{end} of {r}"),
            ));
        }
        let d = self.value(a).data()[start * c..end * c].to_vec();
        self.push(Tensor::new(vec![end - start, c], d)?, Op::Rows(a, start))
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let n = self.value(a).len();
        if idx >= n {
            return Err(TensorError::invalid("pick", format!("index {idx} of {n}")));
        }
        let v = self.value(a).data()[idx];
        self.push(Tensor::scalar(v), Op::Pick(a, idx))
    }

    /// Repeats a vector `[C]` into `rows` rows: `[rows, C]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(TensorError::invalid(
                "broadcast_rows",
                format!("expected a vector, got {:?}", self.shape(a)),
            ));
        }
        let v = self.value(a).data();
        let c = v.len();
        let mut d = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            d.extend_from_slice(v);
        }
        self.push(Tensor::new(vec![rows, c], d)?, Op::BroadcastRows(a))
    }

    /// First difference along time: `[T, C] -> [T-1, C]`.
    pub fn time_diff(&mut self, a: Var) -> Result<Var> {
        let (t, c) = self.dims2("time_diff", a)?;
        if t < 2 {
            return Err(TensorError::invalid("time_diff", "need at least 2 frames"));
        }
        let d = self.value(a).data();
        let out: Vec<f64> = (0..(t - 1) * c).map(|i| d[i + c] - d[i]).collect();
        self.push(Tensor::new(vec![t - 1, c], out)?, Op::TimeDiff(a))
    }

    /// Single-head scaled dot-product attention over `[T, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = self.value(q).cols();
        let kt = self.transpose(k)?;
        let s = self.matmul(q, kt)?;
        let s = self.scale(s, 1.0 / (d as f64).sqrt())?;
        let a = self.softmax(s)?;
        self.matmul(a, v)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        let t = Tensor::new(self.shape(v).to_vec(), data)?;
        self.acc(grads, v, t);
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc_data(grads, *b, gd.iter().map(|v| -v).collect())?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if ng(*a) {
                    self.acc_data(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect())?;
                }
                if ng(*b) {
                    self.acc_data(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect())?;
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if ng(*a) {
                    self.acc_data(grads, *a, gd.iter().zip(vb).map(|(g, y)| g / y).collect())?;
                }
                if ng(*b) {
                    let d = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.acc_data(grads, *b, d)?;
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if ng(*b) {
                    let c = self.shape(*b)[0];
                    let mut gb = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.acc_data(grads, *b, gb)?;
                }
            }
            Op::MulRow(a, b) => {
                let c = self.shape(*b)[0];
                let (va, vb) = (val(*a), val(*b));
                if ng(*a) {
                    let mut ga = gd.to_vec();
                    for row in ga.chunks_mut(c) {
                        for (o, s) in row.iter_mut().zip(vb) {
                            *o *= s;
                        }
                    }
                    self.acc_data(grads, *a, ga)?;
                }
                if ng(*b) {
                    let mut gb = vec![0.0; c];
                    for (grow, arow) in gd.chunks(c).zip(va.chunks(c)) {
                        for ((o, gv), av) in gb.iter_mut().zip(grow).zip(arow) {
                            *o += gv * av;
                        }
                    }
                    self.acc_data(grads, *b, gb)?;
                }
            }
            Op::Scale(a, s) => {
                self.acc_data(grads, *a, gd.iter().map(|v| v * s).collect())?;
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let gm = MatRef::new(gd, m, n);
                if ng(*a) {
                    let ga = matmul(gm, MatRef::new(val(*b), k, n).t());
                    self.acc_data(grads, *a, ga)?;
                }
                if ng(*b) {
                    let gb = matmul(MatRef::new(val(*a), m, k).t(), gm);
                    self.acc_data(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = gd[j * r + i];
                    }
                }
                self.acc_data(grads, *a, ga)?;
            }
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let (t, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (k, cout) = (self.shape(*w)[0], self.shape(*w)[2]);
                let kc = k * cin;
                let tout = node.value.shape()[0];
                let gm = MatRef::new(gd, tout, cout);
                if ng(*w) {
                    let gw = matmul(MatRef::new(cols, tout, kc).t(), gm);
                    self.acc_data(grads, *w, gw)?;
                }
                if ng(*x) {
                    let gcols = matmul(gm, MatRef::new(val(*w), kc, cout).t());
                    let mut gx = vec![0.0; t * cin];
                    for to in 0..tout {
                        for kk in 0..k {
                            let src = (to * stride + kk) as isize - *pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let s = src as usize;
                            let gc = &gcols[to * kc + kk * cin..to * kc + (kk + 1) * cin];
                            for (o, v) in gx[s * cin..(s + 1) * cin].iter_mut().zip(gc) {
                                *o += v;
                            }
                        }
                    }
                    self.acc_data(grads, *x, gx)?;
                }
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let c = node.value.cols();
                let mut gx = vec![0.0; gd.len()];
                for (((grow, xrow), out), r) in gd
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .zip(rstd)
                {
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgx = grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, gv), xv) in out.iter_mut().zip(grow).zip(xrow) {
                        *o = r * (gv - mg - xv * mgx);
                    }
                }
                self.acc_data(grads, *x, gx)?;
            }
            Op::Relu(a) => {
                let va = val(*a);
                let d = gd
                    .iter()
                    .zip(va)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Gelu(a) => {
                let va = val(*a);
                let d = gd
                    .iter()
                    .zip(va)
                    .map(|(g, x)| g * gelu_parts(*x).1)
                    .collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Exp(a) => {
                self.acc_data(grads, *a, gd.iter().zip(y).map(|(g, e)| g * e).collect())?;
            }
            Op::Log(a) => {
                let va = val(*a);
                self.acc_data(grads, *a, gd.iter().zip(va).map(|(g, x)| g / x).collect())?;
            }
            Op::Sqrt(a) => {
                let d = gd.iter().zip(y).map(|(g, s)| g / (2.0 * s)).collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Abs(a) => {
                let va = val(*a);
                let d = gd.iter().zip(va).map(|(g, x)| g * sign(*x)).collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Square(a) => {
                let va = val(*a);
                let d = gd.iter().zip(va).map(|(g, x)| 2.0 * g * x).collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut d = vec![0.0; gd.len()];
                for ((grow, yrow), out) in gd.chunks(c).zip(y.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(grow).zip(yrow) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc_data(grads, *a, d)?;
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let mut d = vec![0.0; gd.len()];
                for ((grow, yrow), out) in gd.chunks(c).zip(y.chunks(c)).zip(d.chunks_mut(c)) {
                    let s: f64 = grow.iter().sum();
                    for ((o, gv), yv) in out.iter_mut().zip(grow).zip(yrow) {
                        *o = gv - yv.exp() * s;
                    }
                }
                self.acc_data(grads, *a, d)?;
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc_data(grads, *a, vec![gd[0]; n])?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.acc_data(grads, *a, vec![gd[0] / n as f64; n])?;
            }
            Op::MeanRows(a) => {
                let (t, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = Vec::with_capacity(t * c);
                for _ in 0..t {
                    d.extend(gd.iter().map(|v| v / t as f64));
                }
                self.acc_data(grads, *a, d)?;
            }
            Op::L1(a) => {
                let va = val(*a);
                self.acc_data(grads, *a, va.iter().map(|x| gd[0] * sign(*x)).collect())?;
            }
            Op::L2(a) => {
                let va = val(*a);
                let n = y[0];
                let d = if n > 0.0 {
                    va.iter().map(|x| gd[0] * x / n).collect()
                } else {
                    vec![0.0; va.len()]
                };
                self.acc_data(grads, *a, d)?;
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let mut d = vec![0.0; gd.len()];
                for (((grow, yrow), out), n) in gd
                    .chunks(c)
                    .zip(y.chunks(c))
                    .zip(d.chunks_mut(c))
                    .zip(norms)
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(grow).zip(yrow) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                self.acc_data(grads, *x, d)?;
            }
            Op::Spectral { x, wr, wi, modes } => {
                let (t, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let back = spectral::backward(gd, val(*x), t, c, val(*wr), val(*wi), *modes);
                if ng(*x) {
                    self.acc_data(grads, *x, back.dx)?;
                }
                if ng(*wr) {
                    self.acc_data(grads, *wr, back.dwr)?;
                }
                if ng(*wi) {
                    self.acc_data(grads, *wi, back.dwi)?;
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.acc_data(grads, *a, gd[..na].to_vec())?;
                self.acc_data(grads, *b, gd[na..].to_vec())?;
            }
            Op::Reshape(a) => self.acc_data(grads, *a, gd.to_vec())?,
            Op::Rows(a, start) => {
                if ng(*a) {
                    let c = node.value.cols();
                    let mut d = vec![0.0; self.value(*a).len()];
                    d[start * c..start * c + gd.len()].copy_from_slice(gd);
                    self.acc_data(grads, *a, d)?;
                }
            }
            Op::Row(a, i) => {
                if ng(*a) {
                    let c = node.value.len();
                    let mut d = vec![0.0; self.value(*a).len()];
                    d[i * c..(i + 1) * c].copy_from_slice(gd);
                    self.acc_data(grads, *a, d)?;
                }
            }
            Op::Pick(a, idx) => {
                if ng(*a) {
                    let mut d = vec![0.0; self.value(*a).len()];
                    d[*idx] = gd[0];
                    self.acc_data(grads, *a, d)?;
                }
            }
            Op::BroadcastRows(a) => {
                let c = self.value(*a).len();
                let mut d = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (o, v) in d.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.acc_data(grads, *a, d)?;
            }
            Op::TimeDiff(a) => {
                let c = node.value.cols();
                let mut d = vec![0.0; self.value(*a).len()];
                for (i, gv) in gd.iter().enumerate() {
                    d[i + c] += gv;
                    d[i] -= gv;
                }
                self.acc_data(grads, *a, d)?;
            }
        }
        Ok(())
    }
}
