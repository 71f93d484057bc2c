use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, bilinear_taps, col2im, im2col, Window};
use crate::params::{ParamId, Params};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    MulBroadcast(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        win: Window,
    },
    Deconv2d {
        input: usize,
        weight: usize,
        win: Window,
    },
    Upsample {
        input: usize,
        ty: Vec<(usize, usize, f64)>,
        tx: Vec<(usize, usize, f64)>,
    },
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    SmoothL1 {
        a: usize,
        b: usize,
        beta: f64,
        reduce: bool,
    },
    Aggregate {
        input: usize,
        rows: Vec<Vec<(usize, f64)>>,
    },
    GatherCells {
        input: usize,
        cells: Vec<usize>,
    },
    ScatterMax {
        input: usize,
        argmax: Vec<usize>,
    },
    PairwiseDiff(usize),
    FocalLoss {
        logits: usize,
        target: Vec<f64>,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const EMPTY: usize = usize::MAX;

/// Recording context for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, ParamId), Var>,
    trainable: Vec<(u64, ParamId, Var)>,
    consumed: bool,
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Split a shape into (outer, axis length, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn need_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::invalid(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter. Frozen stores bind as constants.
    pub fn param(&mut self, params: &Params<'_>, id: ParamId) -> Var {
        let key = (params.store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let value = params.store.get(id).clone();
        let v = if params.trainable {
            let v = self.leaf(value);
            self.trainable.push((key.0, id, v));
            v
        } else {
            self.constant(value)
        };
        self.bound.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.val(a), self.val(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.val(a).map(|v| v * s);
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    /// `[n × c] + [c]`
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(TensorError::mismatch("add_row_bias", xs, bs));
        }
        let c = xs[1];
        let mut out = self.val(x).clone();
        let b = self.val(bias).data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x.0, bias.0), &[x.0, bias.0]))
    }

    /// `[c × h × w] + [c]`
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 3 || bs != [xs[0]] {
            return Err(TensorError::mismatch("add_channel_bias", xs, bs));
        }
        let plane = xs[1] * xs[2];
        let mut out = self.val(x).clone();
        let b = self.val(bias).data();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for o in chunk {
                *o += b[c];
            }
        }
        Ok(self.push(out, Op::AddChannelBias(x.0, bias.0), &[x.0, bias.0]))
    }

    /// Multiply `x` by `w`, broadcasting `w` (leading dim 1) along the leading axis of `x`.
    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.is_empty() || ws.len() != xs.len() || ws[0] != 1 || ws[1..] != xs[1..] {
            return Err(TensorError::mismatch("mul_broadcast", xs, ws));
        }
        let inner = self.val(w).numel();
        let mut out = self.val(x).clone();
        let wd = self.val(w).data();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &wv) in chunk.iter_mut().zip(wd) {
                *o *= wv;
            }
        }
        Ok(self.push(out, Op::MulBroadcast(x.0, w.0), &[x.0, w.0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asz, bsz) = (self.shape(a), self.shape(b));
        if asz.len() != 2 || bsz.len() != 2 || asz[1] != bsz[0] {
            return Err(TensorError::mismatch("matmul", asz, bsz));
        }
        let (m, k, n) = (asz[0], asz[1], bsz[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.val(a).data(), self.val(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        need_rank("transpose", x, 2)?;
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !ok {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let n = self.shape(*v)[axis];
                let d = self.val(*v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(
            t,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.val(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(
            t,
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            &[a.0],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::exp);
        self.push(out, Op::Exp(a.0), &[a.0])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.val(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (x[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    out[idx(j)] /= s;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { input: a.0, axis }, &[a.0]))
    }

    /// 2-D convolution. `x` is `[cin × h × w]`, `weight` is `[cout × cin × k × k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(TensorError::mismatch("conv2d", &xs, &ws));
        }
        if stride == 0 || xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(TensorError::invalid(
                "conv2d",
                "kernel larger than padded input or zero stride",
            ));
        }
        let (cin, h, w, cout, k) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        let win = Window {
            c: cin,
            h,
            w,
            k,
            stride,
            pad,
            oh: kernels::conv_out_size(h, k, stride, pad),
            ow: kernels::conv_out_size(w, k, stride, pad),
        };
        let cols = im2col(self.val(x).data(), win);
        let mut out = vec![0.0; cout * win.oh * win.ow];
        kernels::matmul_nn(
            self.val(weight).data(),
            &cols,
            cout,
            win.cols_rows(),
            win.oh * win.ow,
            &mut out,
        );
        let t = Tensor::new(vec![cout, win.oh, win.ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input: x.0,
                weight: weight.0,
                win,
            },
            &[x.0, weight.0],
        ))
    }

    /// Transposed convolution. `x` is `[cin × h × w]`, `weight` is `[cin × cout × k × k]`;
    /// the output is `[cout × ((h−1)·stride − 2·pad + k + out_pad) × …]`.
    pub fn deconv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] {
            return Err(TensorError::mismatch("deconv2d", &xs, &ws));
        }
        if stride == 0 || out_pad >= stride {
            return Err(TensorError::invalid(
                "deconv2d",
                "output padding must be smaller than stride",
            ));
        }
        let (cin, h, w, cout, k) = (xs[0], xs[1], xs[2], ws[1], ws[2]);
        let big = |n: usize| ((n - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let (oh, ow) = match (big(h), big(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(TensorError::invalid("deconv2d", "padding exceeds output extent")),
        };
        let win = Window {
            c: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        let mut cols = vec![0.0; win.cols_len()];
        kernels::matmul_tn(
            self.val(weight).data(),
            self.val(x).data(),
            cout * k * k,
            cin,
            h * w,
            &mut cols,
        );
        let mut out = vec![0.0; cout * oh * ow];
        col2im(&cols, win, &mut out);
        let t = Tensor::new(vec![cout, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Deconv2d {
                input: x.0,
                weight: weight.0,
                win,
            },
            &[x.0, weight.0],
        ))
    }

    /// Bilinear resize of `[c × h × w]` to `[c × oh × ow]` (half-pixel centers).
    pub fn bilinear_upsample(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || oh == 0 || ow == 0 {
            return Err(TensorError::invalid(
                "bilinear_upsample",
                format!("input {xs:?} to {oh}x{ow}"),
            ));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let d = self.val(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::Upsample { input: x.0, ty, tx }, &[x.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let (x, y) = (self.val(a).data(), self.val(b).data());
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a.0, b.0), &[a.0, b.0]))
    }

    /// Mean smooth-L1 over all elements.
    pub fn smooth_l1_loss(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        self.same_shape("smooth_l1_loss", a, b)?;
        let (x, y) = (self.val(a).data(), self.val(b).data());
        let s = x.iter().zip(y).map(|(p, q)| smooth_l1(p - q, beta)).sum::<f64>() / x.len().max(1) as f64;
        Ok(self.push(
            Tensor::scalar(s),
            Op::SmoothL1 {
                a: a.0,
                b: b.0,
                beta,
                reduce: true,
            },
            &[a.0, b.0],
        ))
    }

    /// Elementwise smooth-L1 without reduction.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        self.same_shape("smooth_l1", a, b)?;
        let out = self.zip_map(a, b, |p, q| smooth_l1(p - q, beta));
        Ok(self.push(
            out,
            Op::SmoothL1 {
                a: a.0,
                b: b.0,
                beta,
                reduce: false,
            },
            &[a.0, b.0],
        ))
    }

    /// Weighted row combination: output row `m` is `Σ w · x[i]` over `rows[m]`.
    pub fn aggregate_rows(&mut self, x: Var, rows: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::invalid(
                "aggregate_rows",
                format!("expected [n x c], got {xs:?}"),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        if let Some(bad) = rows.iter().flatten().find(|(i, _)| *i >= n) {
            return Err(TensorError::invalid(
                "aggregate_rows",
                format!("row {} out of {n}", bad.0),
            ));
        }
        let d = self.val(x).data();
        let mut out = vec![0.0; rows.len() * c];
        for (m, entries) in rows.iter().enumerate() {
            let orow = &mut out[m * c..(m + 1) * c];
            for &(i, wt) in entries {
                for (o, &v) in orow.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                    *o += wt * v;
                }
            }
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(t, Op::Aggregate { input: x.0, rows }, &[x.0]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.aggregate_rows(x, idx.iter().map(|&i| vec![(i, 1.0)]).collect())
    }

    /// Read `[c × h × w]` at flat cell indices, giving `[cells × c]`.
    pub fn gather_cells(&mut self, x: Var, cells: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::invalid(
                "gather_cells",
                format!("expected [c x h x w], got {xs:?}"),
            ));
        }
        let (c, plane) = (xs[0], xs[1] * xs[2]);
        if let Some(bad) = cells.iter().find(|&&i| i >= plane) {
            return Err(TensorError::invalid(
                "gather_cells",
                format!("cell {bad} out of {plane}"),
            ));
        }
        let d = self.val(x).data();
        let mut out = vec![0.0; cells.len() * c];
        for (m, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                out[m * c + ch] = d[ch * plane + cell];
            }
        }
        let t = Tensor::new(vec![cells.len(), c], out)?;
        Ok(self.push(
            t,
            Op::GatherCells {
                input: x.0,
                cells: cells.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Max-pool rows of `[n × c]` into `[c × h × w]` by cell index; empty cells are 0.
    /// Ties keep the earliest row.
    pub fn scatter_max(&mut self, x: Var, cells: &[usize], h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != cells.len() {
            return Err(TensorError::invalid(
                "scatter_max",
                format!("features {xs:?} with {} cell indices", cells.len()),
            ));
        }
        let (n, c, plane) = (xs[0], xs[1], h * w);
        if let Some(bad) = cells.iter().find(|&&i| i >= plane) {
            return Err(TensorError::invalid(
                "scatter_max",
                format!("cell {bad} out of {plane}"),
            ));
        }
        let d = self.val(x).data();
        let mut out = vec![0.0; c * plane];
        let mut argmax = vec![EMPTY; c * plane];
        for r in 0..n {
            for ch in 0..c {
                let slot = ch * plane + cells[r];
                let v = d[r * c + ch];
                if argmax[slot] == EMPTY || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = r;
                }
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, Op::ScatterMax { input: x.0, argmax }, &[x.0]))
    }

    /// `out[i, j] = a[i] − a[j]` for a column `a` of `n` values.
    pub fn pairwise_diff(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a).numel();
        let s = self.shape(a);
        if !(s.len() == 1 || (s.len() == 2 && s[1] == 1)) {
            return Err(TensorError::invalid(
                "pairwise_diff",
                format!("expected a column, got {s:?}"),
            ));
        }
        let d = self.val(a).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = d[i] - d[j];
            }
        }
        let t = Tensor::new(vec![n, n], out)?;
        Ok(self.push(t, Op::PairwiseDiff(a.0), &[a.0]))
    }

    /// Penalty-reduced focal loss on sigmoid(`logits`) against a Gaussian target,
    /// summed and divided by `max(#cells with target == 1, 1)`.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(TensorError::mismatch("focal_loss", self.shape(logits), target.shape()));
        }
        let x = self.val(logits).data();
        let t = target.data();
        let npos = t.iter().filter(|&&v| v == 1.0).count();
        let norm = npos.max(1) as f64;
        let mut s = 0.0;
        for (&xv, &tv) in x.iter().zip(t) {
            let p = sigmoid(xv).clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            if tv == 1.0 {
                s -= (1.0 - p).powi(2) * p.ln();
            } else {
                s -= (1.0 - tv).powi(4) * p * p * (1.0 - p).ln();
            }
        }
        Ok(self.push(
            Tensor::scalar(s / norm),
            Op::FocalLoss {
                logits: logits.0,
                target: t.to_vec(),
                norm,
            },
            &[logits.0],
        ))
    }

    /// Reverse sweep from a scalar `loss`. A graph may be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if self.val(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            trainable: self.trainable.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($idx:expr) => {
                grad_slot(grads, nodes, $idx)
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for idx in [*a, *b] {
                    if let Some(ga) = slot!(idx) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(ga) = slot!(*a) {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddRowBias(x, b) => {
                let c = nodes[*b].value.numel();
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = slot!(*b) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                let c = nodes[*b].value.numel();
                let plane = g.len() / c;
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = slot!(*b) {
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        gb[ch] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::MulBroadcast(x, w) => {
                let (xv, wv) = (nodes[*x].value.data(), nodes[*w].value.data());
                let inner = wv.len();
                if let Some(gx) = slot!(*x) {
                    for (gc, gyc) in gx.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((p, &gy), &wq) in gc.iter_mut().zip(gyc).zip(wv) {
                            *p += gy * wq;
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for (xc, gyc) in xv.chunks(inner).zip(g.chunks(inner)) {
                        for ((p, &gy), &xq) in gw.iter_mut().zip(gyc).zip(xc) {
                            *p += gy * xq;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if let Some(ga) = slot!(*a) {
                    kernels::matmul_nt(g, bt.data(), m, n, k, ga);
                }
                if let Some(gb) = slot!(*b) {
                    kernels::matmul_tn(at.data(), g, k, m, n, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                if let Some(ga) = slot!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &idx in inputs {
                    let n = nodes[idx].value.shape()[*axis];
                    if let Some(gi) = slot!(idx) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut gi[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(p, q)| *p += q);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let ishape = nodes[*input].value.shape().to_vec();
                let len = out.shape()[*axis];
                let (outer, n, inner) = split_axis(&ishape, *axis);
                if let Some(gi) = slot!(*input) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gi[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Relu(a) => {
                let x = nodes[*a].value.data();
                if let Some(ga) = slot!(*a) {
                    for ((p, &gy), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *p += gy;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((p, &gy), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *p += gy * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((p, &gy), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *p += gy * y;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(gi) = slot!(*input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| y[idx(j)] * g[idx(j)]).sum();
                            for j in 0..n {
                                gi[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, win } => {
                let wv = nodes[*weight].value.data();
                let cout = nodes[*weight].value.shape()[0];
                let hw = win.oh * win.ow;
                if nodes[*weight].requires_grad {
                    let cols = im2col(nodes[*input].value.data(), *win);
                    if let Some(gw) = slot!(*weight) {
                        kernels::matmul_nt(g, &cols, cout, hw, win.cols_rows(), gw);
                    }
                }
                if let Some(gx) = slot!(*input) {
                    let mut dcols = vec![0.0; win.cols_len()];
                    kernels::matmul_tn(wv, g, win.cols_rows(), cout, hw, &mut dcols);
                    col2im(&dcols, *win, gx);
                }
            }
            Op::Deconv2d { input, weight, win } => {
                let wt = &nodes[*weight].value;
                let xt = &nodes[*input].value;
                let cin = xt.shape()[0];
                let hw = win.oh * win.ow;
                let dcols = im2col(g, *win);
                if let Some(gx) = slot!(*input) {
                    kernels::matmul_nn(wt.data(), &dcols, cin, win.cols_rows(), hw, gx);
                }
                if let Some(gw) = slot!(*weight) {
                    kernels::matmul_nt(xt.data(), &dcols, cin, hw, win.cols_rows(), gw);
                }
            }
            Op::Upsample { input, ty, tx } => {
                let is = nodes[*input].value.shape();
                let (c, h, w) = (is[0], is[1], is[2]);
                let (oh, ow) = (ty.len(), tx.len());
                if let Some(gi) = slot!(*input) {
                    for ch in 0..c {
                        let plane = &mut gi[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                                plane[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.numel().max(1) as f64;
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|p| *p += g[0] / n);
                }
            }
            Op::Mse(a, b) => {
                let (x, y) = (nodes[*a].value.data(), nodes[*b].value.data());
                let n = x.len().max(1) as f64;
                let sgn = [1.0, -1.0];
                for (k, idx) in [*a, *b].into_iter().enumerate() {
                    if let Some(gi) = slot!(idx) {
                        for ((p, &xv), &yv) in gi.iter_mut().zip(x).zip(y) {
                            *p += sgn[k] * g[0] * 2.0 * (xv - yv) / n;
                        }
                    }
                }
            }
            Op::SmoothL1 { a, b, beta, reduce } => {
                let (x, y) = (nodes[*a].value.data(), nodes[*b].value.data());
                let n = x.len().max(1) as f64;
                let upstream = |j: usize| if *reduce { g[0] / n } else { g[j] };
                let sgn = [1.0, -1.0];
                for (k, idx) in [*a, *b].into_iter().enumerate() {
                    if let Some(gi) = slot!(idx) {
                        for (j, p) in gi.iter_mut().enumerate() {
                            *p += sgn[k] * upstream(j) * smooth_l1_grad(x[j] - y[j], *beta);
                        }
                    }
                }
            }
            Op::Aggregate { input, rows } => {
                let c = out.shape()[1];
                if let Some(gi) = slot!(*input) {
                    for (m, entries) in rows.iter().enumerate() {
                        let grow = &g[m * c..(m + 1) * c];
                        for &(i, wt) in entries {
                            for (p, &q) in gi[i * c..(i + 1) * c].iter_mut().zip(grow) {
                                *p += wt * q;
                            }
                        }
                    }
                }
            }
            Op::GatherCells { input, cells } => {
                let is = nodes[*input].value.shape();
                let (c, plane) = (is[0], is[1] * is[2]);
                if let Some(gi) = slot!(*input) {
                    for (m, &cell) in cells.iter().enumerate() {
                        for ch in 0..c {
                            gi[ch * plane + cell] += g[m * c + ch];
                        }
                    }
                }
            }
            Op::ScatterMax { input, argmax } => {
                let c = nodes[*input].value.shape()[1];
                let plane = argmax.len() / c.max(1);
                if let Some(gi) = slot!(*input) {
                    for (slot_idx, &r) in argmax.iter().enumerate() {
                        if r != EMPTY {
                            let ch = slot_idx / plane;
                            gi[r * c + ch] += g[slot_idx];
                        }
                    }
                }
            }
            Op::PairwiseDiff(a) => {
                let n = nodes[*a].value.numel();
                if let Some(ga) = slot!(*a) {
                    for i in 0..n {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            ga[i] += gv;
                            ga[j] -= gv;
                        }
                    }
                }
            }
            Op::FocalLoss { logits, target, norm } => {
                let x = nodes[*logits].value.data();
                if let Some(gi) = slot!(*logits) {
                    for ((p, &xv), &tv) in gi.iter_mut().zip(x).zip(target) {
                        let raw = sigmoid(xv);
                        if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&raw) {
                            continue;
                        }
                        let q = 1.0 - raw;
                        let d = if tv == 1.0 {
                            2.0 * raw * q * q * raw.ln() - q * q * q
                        } else {
                            -(1.0 - tv).powi(4) * (2.0 * raw * raw * q * q.ln() - raw * raw * raw)
                        };
                        *p += g[0] * d / norm;
                    }
                }
            }
        }
    }
}

const FOCAL_EPS: f64 = 1e-4;

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], idx: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let n = nodes[idx].value.numel();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; n]))
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    trainable: Vec<(u64, ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it
    /// through any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter bound from the store with `uid`.
    pub fn params_of(&self, uid: u64) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> {
        self.trainable
            .iter()
            .filter(move |(u, _, _)| *u == uid)
            .map(|&(_, id, v)| (id, self.get(v)))
    }
}
