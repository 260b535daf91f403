use serde::{Deserialize, Serialize};

use super::kernels::{gemm, Mat};
use super::{broadcast_shape, broadcast_strides, strides_of, validate_permutation, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the coordinate pairing inside rotary encoding is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotateVariant {
    /// `concat(-x[d/2..], x[..d/2])`.
    #[default]
    Standard,
    /// Keeps both halves in place and negates every other element of the
    /// second half, starting with its first element.
    PaperLiteral,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    SoftmaxLast(Var),
    RotateHalf(Var, RotateVariant),
    Sum(Var),
    Mean(Var),
    Huber { pred: Var, target: Var, delta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of one forward pass.
///
/// Nodes are appended in execution order, so replaying them backwards is a
/// valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
    nan_softmax_slices: usize,
}

/// Gradients produced by [`Tape::backward`], one per differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that was placed with `requires_grad`; `None` for
    /// anything else. Leaves the loss does not reach get an all-zero tensor.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never records backward rules; every result is a constant.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of softmax slices that contained NaN since the tape was created.
    pub fn nan_softmax_slices(&self) -> usize {
        self.nan_softmax_slices
    }

    /// Records `t` as a leaf; it participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad && !self.no_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Copies a trainable tensor onto the tape as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        value.requires_grad = requires_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor {
                shape: ta.shape.clone(),
                data,
                requires_grad: false,
            });
        }
        let out = broadcast_shape(&ta.shape, &tb.shape).ok_or_else(|| Error::shape(name, &ta.shape, &tb.shape))?;
        let sa = broadcast_strides(&ta.shape, &out);
        let sb = broadcast_strides(&tb.shape, &out);
        let mut data = vec![0.0; out.iter().product()];
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ta.data[ia], tb.data[ib]));
        Ok(Tensor {
            shape: out,
            data,
            requires_grad: false,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "hadamard", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::sin);
        self.push(t, Op::Sin(x), &[x])
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::cos);
        self.push(t, Op::Cos(x), &[x])
    }

    // ---- structural -------------------------------------------------------

    /// Batched product over the trailing two axes.
    ///
    /// The right operand either shares the left operand's leading axes or is a
    /// plain matrix applied to every leading slice.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the trailing two axes, without materialising the transpose.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let op_name = if transpose_b { "matmul_transposed" } else { "matmul" };
        let geo = MatmulGeometry::new(&ta.shape, &tb.shape, transpose_b)
            .ok_or_else(|| Error::shape(op_name, &ta.shape, &tb.shape))?;
        let mut data = vec![0.0; geo.batch * geo.m * geo.q];
        if geo.shared_rhs {
            gemm(
                1.0,
                &ta.data,
                Mat::row_major(0, geo.batch * geo.m, geo.p),
                &tb.data,
                geo.b_view(0),
                0.0,
                &mut data,
                Mat::row_major(0, geo.batch * geo.m, geo.q),
            );
        } else {
            for l in 0..geo.batch {
                gemm(
                    1.0,
                    &ta.data,
                    Mat::row_major(l * geo.m * geo.p, geo.m, geo.p),
                    &tb.data,
                    geo.b_view(l),
                    0.0,
                    &mut data,
                    Mat::row_major(l * geo.m * geo.q, geo.m, geo.q),
                );
            }
        }
        let mut shape = ta.shape[..ta.rank() - 2].to_vec();
        shape.extend([geo.m, geo.q]);
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
        };
        Ok(self.push(t, Op::MatMul { a, b, transpose_b }, &[a, b]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        validate_permutation(axes, tx.rank())?;
        let t = permute_tensor(tx, axes);
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &tx.shape, shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: tx.data.clone(),
            requires_grad: false,
        };
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Softmax over the last axis, stabilised by subtracting each slice's max.
    ///
    /// A slice containing NaN yields an all-NaN slice and bumps
    /// [`Tape::nan_softmax_slices`].
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let width = *tx.shape.last().ok_or_else(|| {
            Error::InvalidArgument("softmax_last needs at least one axis".into())
        })?;
        let mut data = tx.data.clone();
        let mut nan_slices = 0;
        for row in data.chunks_mut(width) {
            if row.iter().any(|v| v.is_nan()) {
                row.fill(f64::NAN);
                nan_slices += 1;
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
            requires_grad: false,
        };
        self.nan_softmax_slices += nan_slices;
        Ok(self.push(t, Op::SoftmaxLast(x), &[x]))
    }

    pub fn rotate_half(&mut self, x: Var, variant: RotateVariant) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.shape.last().copied().unwrap_or(0);
        if d == 0 || d % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "rotate_half needs an even last axis, got shape {:?}",
                tx.shape
            )));
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: rotate_half_data(&tx.data, d, variant),
            requires_grad: false,
        };
        Ok(self.push(t, Op::RotateHalf(x, variant), &[x]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.sum() / tx.numel() as f64);
        self.push(t, Op::Mean(x), &[x])
    }

    /// Mean Huber loss of `pred - target` with threshold `delta`.
    pub fn huber_loss(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape != tt.shape {
            return Err(Error::shape("huber_loss", &tp.shape, &tt.shape));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("huber delta must be positive, got {delta}")));
        }
        let total: f64 = tp
            .data
            .iter()
            .zip(&tt.data)
            .map(|(p, t)| {
                let r = (p - t).abs();
                if r <= delta {
                    0.5 * r * r
                } else {
                    delta * (r - 0.5 * delta)
                }
            })
            .sum();
        let t = Tensor::scalar(total / tp.numel() as f64);
        Ok(self.push(t, Op::Huber { pred, target, delta }, &[pred, target]))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                    requires_grad: false,
                });
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(&node.value.shape));
            }
        }
        Ok(Gradients { leaves })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out = &node.value.shape;
                let sa = broadcast_strides(self.shape(a), out);
                let sb = broadcast_strides(self.shape(b), out);
                if let Some(ga) = self.accum(grads, a) {
                    for_each_broadcast(out, &sa, &sb, |o, ia, _| ga[ia] += g[o]);
                }
                if let Some(gb) = self.accum(grads, b) {
                    for_each_broadcast(out, &sa, &sb, |o, _, ib| gb[ib] += sign * g[o]);
                }
            }
            &Op::Mul(a, b) => {
                let out = &node.value.shape;
                let (ta, tb) = (self.value(a), self.value(b));
                let sa = broadcast_strides(&ta.shape, out);
                let sb = broadcast_strides(&tb.shape, out);
                if let Some(ga) = self.accum(grads, a) {
                    for_each_broadcast(out, &sa, &sb, |o, ia, ib| ga[ia] += g[o] * tb.data[ib]);
                }
                if let Some(gb) = self.accum(grads, b) {
                    for_each_broadcast(out, &sa, &sb, |o, ia, ib| gb[ib] += g[o] * ta.data[ia]);
                }
            }
            &Op::Scale(x, factor) => {
                if let Some(gx) = self.accum(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &u)| *d += factor * u);
                }
            }
            &Op::Relu(x) => {
                let tx = self.value(x);
                if let Some(gx) = self.accum(grads, x) {
                    for ((d, &u), &v) in gx.iter_mut().zip(g).zip(&tx.data) {
                        if v > 0.0 {
                            *d += u;
                        }
                    }
                }
            }
            &Op::Sin(x) | &Op::Cos(x) => {
                let is_sin = matches!(node.op, Op::Sin(_));
                let tx = self.value(x);
                if let Some(gx) = self.accum(grads, x) {
                    for ((d, &u), &v) in gx.iter_mut().zip(g).zip(&tx.data) {
                        *d += if is_sin { u * v.cos() } else { -u * v.sin() };
                    }
                }
            }
            &Op::MatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let geo = MatmulGeometry::new(&ta.shape, &tb.shape, transpose_b).expect("validated in forward");
                let (m, p, q, batch) = (geo.m, geo.p, geo.q, geo.batch);
                if let Some(ga) = self.accum(grads, a) {
                    // dA = dC · Bᵀ
                    if geo.shared_rhs {
                        gemm(
                            1.0,
                            g,
                            Mat::row_major(0, batch * m, q),
                            &tb.data,
                            geo.b_view(0).t(),
                            1.0,
                            ga,
                            Mat::row_major(0, batch * m, p),
                        );
                    } else {
                        for l in 0..batch {
                            gemm(
                                1.0,
                                g,
                                Mat::row_major(l * m * q, m, q),
                                &tb.data,
                                geo.b_view(l).t(),
                                1.0,
                                ga,
                                Mat::row_major(l * m * p, m, p),
                            );
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, b) {
                    // dB = Aᵀ · dC, or dBᵀ = dCᵀ · A for the transposed form
                    let slices: Vec<(usize, usize, usize, usize)> = if geo.shared_rhs {
                        vec![(0, 0, 0, batch * m)]
                    } else {
                        (0..batch).map(|l| (l * m * p, l * m * q, l * p * q, m)).collect()
                    };
                    for (a_off, g_off, b_off, rows) in slices {
                        let av = Mat::row_major(a_off, rows, p);
                        let gv = Mat::row_major(g_off, rows, q);
                        if transpose_b {
                            gemm(1.0, g, gv.t(), &ta.data, av, 1.0, gb, Mat::row_major(b_off, q, p));
                        } else {
                            gemm(1.0, &ta.data, av.t(), g, gv, 1.0, gb, Mat::row_major(b_off, p, q));
                        }
                    }
                }
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let in_shape = self.shape(x).to_vec();
                if let Some(gx) = self.accum(grads, x) {
                    let in_strides = strides_of(&in_shape);
                    let ps: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
                    for_each_strided(&node.value.shape, &ps, |o, i| gx[i] += g[o]);
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.accum(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &u)| *d += u);
                }
            }
            &Op::SoftmaxLast(x) => {
                let y = &node.value;
                let width = *y.shape.last().expect("non-empty");
                if let Some(gx) = self.accum(grads, x) {
                    for ((gx_row, y_row), g_row) in gx.chunks_mut(width).zip(y.data.chunks(width)).zip(g.chunks(width)) {
                        let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in gx_row.iter_mut().zip(y_row).zip(g_row) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            &Op::RotateHalf(x, variant) => {
                let d = *node.value.shape.last().expect("non-empty");
                let h = d / 2;
                if let Some(gx) = self.accum(grads, x) {
                    for (gx_row, g_row) in gx.chunks_mut(d).zip(g.chunks(d)) {
                        match variant {
                            RotateVariant::Standard => {
                                for j in 0..h {
                                    gx_row[j + h] -= g_row[j];
                                    gx_row[j] += g_row[j + h];
                                }
                            }
                            RotateVariant::PaperLiteral => {
                                for j in 0..d {
                                    gx_row[j] += literal_sign(j, h) * g_row[j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::Sum(x) | &Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                let scale = if matches!(node.op, Op::Mean(_)) { g[0] / n } else { g[0] };
                if let Some(gx) = self.accum(grads, x) {
                    gx.iter_mut().for_each(|d| *d += scale);
                }
            }
            &Op::Huber { pred, target, delta } => {
                let (tp, tt) = (self.value(pred), self.value(target));
                let n = tp.numel() as f64;
                let slope: Vec<f64> = tp
                    .data
                    .iter()
                    .zip(&tt.data)
                    .map(|(p, t)| (p - t).clamp(-delta, delta) * g[0] / n)
                    .collect();
                if let Some(gp) = self.accum(grads, pred) {
                    gp.iter_mut().zip(&slope).for_each(|(d, s)| *d += s);
                }
                if let Some(gt) = self.accum(grads, target) {
                    gt.iter_mut().zip(&slope).for_each(|(d, s)| *d -= s);
                }
            }
        }
    }
}

struct MatmulGeometry {
    batch: usize,
    m: usize,
    p: usize,
    q: usize,
    shared_rhs: bool,
    transpose_b: bool,
}

impl MatmulGeometry {
    fn new(a: &[usize], b: &[usize], transpose_b: bool) -> Option<Self> {
        if a.len() < 2 || b.len() < 2 {
            return None;
        }
        let (m, p) = (a[a.len() - 2], a[a.len() - 1]);
        let (b0, b1) = (b[b.len() - 2], b[b.len() - 1]);
        let (bp, q) = if transpose_b { (b1, b0) } else { (b0, b1) };
        if bp != p {
            return None;
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let shared_rhs = b_lead.is_empty();
        if !shared_rhs && a_lead != b_lead {
            return None;
        }
        Some(MatmulGeometry {
            batch: a_lead.iter().product(),
            m,
            p,
            q,
            shared_rhs,
            transpose_b,
        })
    }

    /// The `p × q` right operand for leading slice `l`.
    fn b_view(&self, l: usize) -> Mat {
        let offset = if self.shared_rhs { 0 } else { l * self.p * self.q };
        if self.transpose_b {
            Mat::row_major(offset, self.q, self.p).t()
        } else {
            Mat::row_major(offset, self.p, self.q)
        }
    }
}

fn literal_sign(j: usize, half: usize) -> f64 {
    if j >= half && (j - half) % 2 == 0 {
        -1.0
    } else {
        1.0
    }
}

pub(crate) fn rotate_half_data(x: &[f64], d: usize, variant: RotateVariant) -> Vec<f64> {
    let h = d / 2;
    let mut out = vec![0.0; x.len()];
    for (o, row) in out.chunks_mut(d).zip(x.chunks(d)) {
        match variant {
            RotateVariant::Standard => {
                for j in 0..h {
                    o[j] = -row[j + h];
                    o[j + h] = row[j];
                }
            }
            RotateVariant::PaperLiteral => {
                for j in 0..d {
                    o[j] = literal_sign(j, h) * row[j];
                }
            }
        }
    }
    out
}

pub(crate) fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let in_strides = strides_of(&x.shape);
    let ps: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = vec![0.0; x.numel()];
    for_each_strided(&shape, &ps, |o, i| data[o] = x.data[i]);
    Tensor {
        shape,
        data,
        requires_grad: false,
    }
}

fn for_each_strided(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, strides, &zeros, |o, i, _| f(o, i));
}

/// Visits every output offset of `out` together with the matching offsets of
/// two operands addressed through (possibly zero) strides.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_sum() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let ones = tape.constant(Tensor::ones(&[3, 1]));
        let s = tape.matmul(row, ones).unwrap();
        assert_eq!(tape.value(s).shape(), &[1, 1]);
        assert_eq!(tape.value(s).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");

        let a = tape.constant(Tensor::zeros(&[2, 2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut tape = Tape::new();
        let a = Tensor::from_fn(&[2, 2, 3], |i| (i[0] * 6 + i[1] * 3 + i[2]) as f64 * 0.5 - 1.0);
        let b = Tensor::from_fn(&[2, 3, 2], |i| (i[0] + i[1]) as f64 - (i[2] as f64) * 0.25);
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let out = tape.matmul(va, vb).unwrap();
        let out = tape.value(out);
        for l in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    let want: f64 = (0..3).map(|k| a.get(&[l, r, k]) * b.get(&[l, k, c])).sum();
                    assert!((out.get(&[l, r, c]) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn softmax_symmetric_and_overflow_safe() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let sa = tape.softmax_last(a).unwrap();
        let sb = tape.softmax_last(b).unwrap();
        assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(sb).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_propagates_nan_with_flag() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[f64::NAN, 1.0, 0.0, 1.0]));
        let s = tape.softmax_last(x).unwrap();
        let v = tape.value(s);
        assert!(v.data()[0].is_nan() && v.data()[1].is_nan());
        assert!(v.data()[2].is_finite());
        assert_eq!(tape.nan_softmax_slices(), 1);
    }

    #[test]
    fn relu_and_hadamard_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let ones = tape.constant(Tensor::ones(&[3]));
        let h = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(h).data(), tape.value(x).data());
    }

    #[test]
    fn broadcast_add_shape_and_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 1, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 5, 4]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 5, 4]);
        let d = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.add(a, d).unwrap_err().to_string();
        assert!(err.contains("[3, 1, 4]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn permute_shape_and_invalid_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[12, 307, 4]));
        let y = tape.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(tape.shape(y), &[307, 12, 4]);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn permute_sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i[2] as f64).with_grad());
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.shape(), &[2, 3, 4]);
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_and_disconnected_leaf() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let unused = tape.leaf(Tensor::ones(&[2]).with_grad());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).with_grad());
        let y = tape.scale(x, 2.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn rotate_half_variants() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.rotate_half(x, RotateVariant::Standard).unwrap();
        assert_eq!(tape.value(s).data(), &[-3.0, -4.0, 1.0, 2.0]);
        let l = tape.rotate_half(x, RotateVariant::PaperLiteral).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0, 2.0, -3.0, 4.0]);
        let ss = tape.rotate_half(s, RotateVariant::Standard).unwrap();
        assert_eq!(tape.value(ss).data(), &[-1.0, -2.0, -3.0, -4.0]);
        let odd = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.rotate_half(odd, RotateVariant::Standard).is_err());
    }

    #[test]
    fn huber_branches() {
        for (r, want) in [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5), (-2.0, 1.5)] {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::scalar(r).with_grad());
            let z = tape.constant(Tensor::scalar(0.0));
            let l = tape.huber_loss(p, z, 1.0).unwrap();
            assert_eq!(tape.value(l).data()[0], want);
            let g = tape.backward(l).unwrap();
            assert_eq!(g.get(p).unwrap().data()[0], r.clamp(-1.0, 1.0));
        }
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        assert!(!tape.requires_grad(y));
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }
}
