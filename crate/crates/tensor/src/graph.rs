//! Eager reverse-mode tape.
//!
//! Every op computes its value immediately and records how to route the
//! gradient back to its inputs. Nodes are stored in creation order, so a
//! single reverse sweep from the loss visits every consumer before its
//! producers.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{GradStore, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
    pub c_out: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn out_rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut cols = vec![0.0; self.out_rows() * patch];
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            let off = (ky * self.kw + kx) * self.c_in;
                            dst[off..off + self.c_in].copy_from_slice(&input[src..src + self.c_in]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let patch = self.patch();
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    let src = &cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            let off = (ky * self.kw + kx) * self.c_in;
                            for c in 0..self.c_in {
                                out[dst + c] += src[off + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Hypot(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    SumRows(Var),
    Sum(Var),
    LogSoftmax(Var),
    ClampMin(Var, f64),
    Conv {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    GlobalAvgPool {
        input: Var,
        n: usize,
        spatial: usize,
        c: usize,
    },
    SegmentMax {
        input: Var,
        argmax: Vec<Option<usize>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape holding values and the ops that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Free leaf that receives a gradient but is not tied to a parameter name.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "variable")
    }

    /// Binds a named parameter; repeated bindings of the same name share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true, "param")?;
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(av.data(), false, bv.data(), false, m, k, n, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Adds a length-`n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(mismatch("add_row", av, bv));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[a, bias]);
        self.push(out, Op::AddRow(a, bias), rg, "add_row")
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, factor), rg, "scale")
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, factors: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != factors.shape() {
            return Err(mismatch("mul_const", av, factors));
        }
        let data = av.data().iter().zip(factors.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::MulConst(a, factors.data().to_vec()), rg, "mul_const")
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Elu(a), rg, "elu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), rg, "tanh")
    }

    /// Elementwise `sqrt(a² + b²)`; the subgradient at the origin is zero.
    pub fn hypot(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "hypot", f64::hypot)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Hypot(a, b), rg, "hypot")
    }

    /// Concatenates rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::ShapeMismatch {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), pv));
            }
            total += pv.cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let c = pv.cols();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(&pv.data()[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Columns `start..end` of a rank-2 view of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if start > end || end > cols {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + end]);
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(&[rows, w], data)?, Op::SliceCols(a, start, end), rg, "slice_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Row sums of a rank-2 view, shape `(rows, 1)`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols().max(1);
        let data: Vec<f64> = av.data().chunks(c).map(|r| r.iter().sum()).collect();
        let rows = data.len();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(&[rows, 1], data)?, Op::SumRows(a), rg, "sum_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// Row-wise log-softmax of a rank-2 view.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(out, Op::LogSoftmax(a), rg, "log_softmax")
    }

    /// `max(a, floor)` elementwise; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(floor));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::ClampMin(a, floor), rg, "clamp_min")
    }

    /// 2-D convolution over an NHWC input with a `(kh, kw, c_in, c_out)` kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Var> {
        let (iv, kv, bv) = (self.value(input), self.value(kernel), self.value(bias));
        if iv.rank() != 4 || kv.rank() != 4 || kv.shape()[2] != iv.shape()[3] || bv.len() != kv.shape()[3] || stride == 0
        {
            return Err(mismatch("conv2d", iv, kv));
        }
        let (n, h, w, c_in) = (iv.shape()[0], iv.shape()[1], iv.shape()[2], iv.shape()[3]);
        let (kh, kw, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[3]);
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(mismatch("conv2d", iv, kv));
        }
        let geom = ConvGeometry {
            n,
            h,
            w,
            c_in,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            ho: (h + 2 * pad_h - kh) / stride + 1,
            wo: (w + 2 * pad_w - kw) / stride + 1,
            c_out,
        };
        let cols = geom.im2col(iv.data());
        let rows = geom.out_rows();
        let mut out = vec![0.0; rows * c_out];
        gemm(&cols, false, kv.data(), false, rows, geom.patch(), c_out, &mut out, false);
        for row in out.chunks_mut(c_out) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(&[n, geom.ho, geom.wo, c_out], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        // The patch matrix is only needed to form the kernel gradient.
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    /// Mean over the spatial axes of an NHWC tensor, shape `(n, c)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let iv = self.value(input);
        if iv.rank() != 4 {
            return Err(mismatch("global_avg_pool", iv, iv));
        }
        let (n, spatial, c) = (iv.shape()[0], iv.shape()[1] * iv.shape()[2], iv.shape()[3]);
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for s in 0..spatial {
                let src = &iv.data()[(b * spatial + s) * c..(b * spatial + s + 1) * c];
                for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / spatial as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.any_grad(&[input]);
        self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool { input, n, spatial, c }, rg, "global_avg_pool")
    }

    /// Column-wise max over each contiguous row segment; empty segments yield zeros.
    pub fn segment_max(&mut self, input: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let iv = self.value(input);
        let (rows, c) = (iv.rows(), iv.cols());
        let mut out = vec![0.0; segments.len() * c];
        let mut argmax = vec![None; segments.len() * c];
        for (s, &(start, end)) in segments.iter().enumerate() {
            if start > end || end > rows {
                return Err(TensorError::ShapeMismatch {
                    op: "segment_max",
                    left: iv.shape().to_vec(),
                    right: vec![start, end],
                });
            }
            for col in 0..c {
                let mut best: Option<(usize, f64)> = None;
                for r in start..end {
                    let v = iv.data()[r * c + col];
                    if best.map_or(true, |(_, b)| v > b) {
                        best = Some((r, v));
                    }
                }
                if let Some((r, v)) = best {
                    out[s * c + col] = v;
                    argmax[s * c + col] = Some(r * c + col);
                }
            }
        }
        let rg = self.any_grad(&[input]);
        self.push(
            Tensor::new(&[segments.len(), c], out)?,
            Op::SegmentMax { input, argmax },
            rg,
            "segment_max",
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("initialized above").data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.accumulate_with(grads, *a, |ga| gemm(g.data(), false, bv.data(), true, m, n, k, ga, true));
                self.accumulate_with(grads, *b, |gb| gemm(av.data(), true, g.data(), false, k, m, n, gb, true));
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                let n = out.cols();
                self.accumulate_with(grads, *bias, |gb| {
                    for row in g.data().chunks(n) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    for ((d, gg), y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gg * y;
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for ((d, gg), x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gg * x;
                    }
                });
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g.map(|x| x * factor)),
            Op::MulConst(a, factors) => self.accumulate_with(grads, *a, |ga| {
                for ((d, gg), f) in ga.iter_mut().zip(g.data()).zip(factors) {
                    *d += gg * f;
                }
            }),
            Op::Elu(a) => {
                let av = self.value(*a);
                self.accumulate_with(grads, *a, |ga| {
                    for (((d, gg), x), y) in ga.iter_mut().zip(g.data()).zip(av.data()).zip(out.data()) {
                        *d += if *x > 0.0 { *gg } else { gg * (y + 1.0) };
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate_with(grads, *a, |ga| {
                for ((d, gg), y) in ga.iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gg * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.accumulate_with(grads, *a, |ga| {
                for ((d, gg), y) in ga.iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gg * (1.0 - y * y);
                }
            }),
            Op::Hypot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ratio = |num: &[f64]| -> Vec<f64> {
                    num.iter()
                        .zip(out.data())
                        .zip(g.data())
                        .map(|((x, r), gg)| if *r > 0.0 { gg * x / r } else { 0.0 })
                        .collect()
                };
                let ga = ratio(av.data());
                let gb = ratio(bv.data());
                self.accumulate(grads, *a, Tensor::new(av.shape(), ga)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape(), gb)?);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate_with(grads, p, |gp| {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g.data()[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                let cols = self.value(*a).cols();
                let w = end - start;
                self.accumulate_with(grads, *a, |ga| {
                    for (r, row) in g.data().chunks(w.max(1)).enumerate().take(out.rows()) {
                        for (j, v) in row.iter().enumerate() {
                            ga[r * cols + start + j] += v;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::SumRows(a) => {
                let c = self.value(*a).cols().max(1);
                self.accumulate_with(grads, *a, |ga| {
                    for (row, gg) in ga.chunks_mut(c).zip(g.data()) {
                        row.iter_mut().for_each(|d| *d += gg);
                    }
                });
            }
            Op::Sum(a) => {
                let gg = g.item();
                self.accumulate_with(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += gg));
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                self.accumulate_with(grads, *a, |ga| {
                    for ((drow, grow), yrow) in ga.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, gg), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gg - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a);
                self.accumulate_with(grads, *a, |ga| {
                    for ((d, gg), x) in ga.iter_mut().zip(g.data()).zip(av.data()) {
                        if *x > *floor {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.out_rows();
                let patch = geom.patch();
                let c_out = geom.c_out;
                self.accumulate_with(grads, *bias, |gb| {
                    for row in g.data().chunks(c_out) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
                if self.requires_grad(*kernel) {
                    self.accumulate_with(grads, *kernel, |gk| {
                        gemm(cols, true, g.data(), false, patch, rows, c_out, gk, true)
                    });
                }
                if self.requires_grad(*input) {
                    let kv = self.value(*kernel);
                    let mut gcols = vec![0.0; rows * patch];
                    gemm(g.data(), false, kv.data(), true, rows, c_out, patch, &mut gcols, false);
                    self.accumulate_with(grads, *input, |gi| geom.col2im(&gcols, gi));
                }
            }
            Op::GlobalAvgPool { input, n, spatial, c } => {
                let inv = 1.0 / *spatial as f64;
                self.accumulate_with(grads, *input, |gi| {
                    for b in 0..*n {
                        let src = &g.data()[b * c..(b + 1) * c];
                        for s in 0..*spatial {
                            for (d, v) in gi[(b * spatial + s) * c..(b * spatial + s + 1) * c].iter_mut().zip(src) {
                                *d += v * inv;
                            }
                        }
                    }
                });
            }
            Op::SegmentMax { input, argmax } => {
                self.accumulate_with(grads, *input, |gi| {
                    for (gg, idx) in g.data().iter().zip(argmax) {
                        if let Some(idx) = idx {
                            gi[*idx] += gg;
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Parameters bound on this graph, in binding order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddRow(..) => "add_row",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MulConst(..) => "mul_const",
        Op::Elu(..) => "elu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Hypot(..) => "hypot",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::Reshape(..) => "reshape",
        Op::SumRows(..) => "sum_rows",
        Op::Sum(..) => "sum",
        Op::LogSoftmax(..) => "log_softmax",
        Op::ClampMin(..) => "clamp_min",
        Op::Conv { .. } => "conv2d",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::SegmentMax { .. } => "segment_max",
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

/// Result of [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter in `store`; parameters the loss never reached get exact zeros.
    pub fn for_params(&self, graph: &Graph, store: &ParamStore) -> GradStore {
        let mut out = GradStore::zeros_like(store);
        for (name, v) in graph.bound_params() {
            if let Some(g) = self.get(*v) {
                if let Some(slot) = out.get_mut(name) {
                    slot.add_assign(g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0)).unwrap();
        let c = g.constant(Tensor::scalar(5.0)).unwrap();
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn detach_cuts_the_path() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0)).unwrap();
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn hypot_subgradient_at_origin_is_zero() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(0.0)).unwrap();
        let b = g.variable(Tensor::scalar(0.0)).unwrap();
        let h = g.hypot(a, b).unwrap();
        let grads = g.backward(h).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 0.0);
        assert_eq!(grads.get(b).unwrap().item(), 0.0);
    }

    #[test]
    fn nan_input_is_an_error() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(Tensor::scalar(f64::NAN)),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn segment_max_routes_to_argmax_and_zero_fills_empty() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[3, 2], vec![1.0, 5.0, 4.0, 2.0, 0.0, 0.0]).unwrap()).unwrap();
        let m = g.segment_max(x, &[(0, 2), (2, 2)]).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0, 0.0, 0.0]);
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
