use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{col2im, gemm, im2col, MatRef, Window};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input size (odd kernels, stride 1).
    Same,
    Valid,
    Explicit(usize),
}

/// Vector-Jacobian product for [`Graph::custom`]: given the input values, the
/// output value and the output gradient, return one gradient per input.
pub type BackwardFn = Rc<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, k: Var, stride: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { x: Var, index: Rc<Vec<usize>> },
    Reshape(Var),
    Norm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64>, layout: NormLayout, batch_stats: bool },
    Sum(Var),
    WeightedSse { pred: Var, target: Tensor, weights: Option<Tensor>, scale: f64 },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

/// How a normalization op groups values into statistics.
#[derive(Debug, Clone, Copy)]
enum NormLayout {
    /// Each row of the last axis (layer norm).
    LastAxis { d: usize },
    /// Each channel of an NCHW tensor (batch norm).
    Channel { n: usize, c: usize, hw: usize },
}

impl NormLayout {
    fn groups(&self) -> usize {
        match *self {
            NormLayout::LastAxis { .. } => 0,
            NormLayout::Channel { c, .. } => c,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of a single forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Split a shape into (outer, axis length, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
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

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Free leaf that does receive a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, true)
    }

    /// Graph handle for a stored parameter. Repeated calls return the same
    /// node so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Leaf, requires_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect())?;
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale(x, s), rg)
    }

    /// Mean of several same-shape tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| TensorError::Invalid("mean of no tensors".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        self.scale(acc, 1.0 / xs.len() as f64)
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| shape_err("add_row_bias", "scalar input"))?;
        if self.shape(b) != [d] {
            return Err(shape_err("add_row_bias", format!("bias {:?} for rows of {d}", self.shape(b))));
        }
        let (vx, vb) = (self.value(x), self.value(b).data());
        let data = vx.data().iter().enumerate().map(|(i, v)| v + vb[i % d]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        self.push("add_row_bias", t, Op::AddRowBias(x, b), rg)
    }

    /// `x[n, c, h, w] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(b) != [s[1]] {
            return Err(shape_err("add_channel_bias", format!("x {:?}, bias {:?}", s, self.shape(b))));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let (vx, vb) = (self.value(x), self.value(b).data());
        let data = vx.data().iter().enumerate().map(|(i, v)| v + vb[(i / hw) % c]).collect();
        let t = Tensor::new(s, data)?;
        let rg = self.rg(&[x, b]);
        self.push("add_channel_bias", t, Op::AddChannelBias(x, b), rg)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (2-D operands required)")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", format!("inner dims {sa:?} x {sb:?}{}", if trans_b { "^T" } else { "" })));
        }
        let mut out = vec![0.0; m * n];
        let am = MatRef::new(self.value(a).data(), m, k);
        let bm = if trans_b { MatRef::new(self.value(b).data(), n, k).t() } else { MatRef::new(self.value(b).data(), k, n) };
        gemm(am, bm, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    /// `a[m, k] * b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m, k] * b[n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Fully connected layer `x W + b` for `x[n, d_in]`, `W[d_in, d_out]`, `b[d_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        let rg = self.rg(&[x]);
        self.push(name, t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |a| 1.0 / (1.0 + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = *v.shape().last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", t, Op::Softmax(x), rg)
    }

    /// Cross-correlation of `x[n, c_in, h, w]` with `k[c_out, c_in, kh, kw]`
    /// (square kernels). No bias; see [`Graph::add_channel_bias`].
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[2] != sk[3] || sx[1] != sk[1] || stride == 0 {
            return Err(shape_err("conv2d", format!("x {sx:?}, kernel {sk:?}, stride {stride}")));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, ks) = (sk[0], sk[2]);
        let pad = match padding {
            Padding::Same => {
                if ks % 2 == 0 || stride != 1 {
                    return Err(shape_err("conv2d", "same padding needs an odd kernel and stride 1"));
                }
                (ks - 1) / 2
            }
            Padding::Valid => 0,
            Padding::Explicit(p) => p,
        };
        if h + 2 * pad < ks || w + 2 * pad < ks {
            return Err(shape_err("conv2d", format!("kernel {ks} larger than padded input {h}x{w} (pad {pad})")));
        }
        let (ho, wo) = ((h + 2 * pad - ks) / stride + 1, (w + 2 * pad - ks) / stride + 1);
        let win = Window { channels: cin, h, w, k: ks, stride, pad, gh: ho, gw: wo };
        let mut cols = vec![0.0; win.col_rows() * win.col_cols()];
        let mut out = vec![0.0; n * cout * ho * wo];
        let (vx, vk) = (self.value(x).data(), self.value(k).data());
        let kmat = MatRef::new(vk, cout, win.col_rows());
        for (img, dst) in vx.chunks(cin * h * w).zip(out.chunks_mut(cout * ho * wo)) {
            im2col(img, &win, &mut cols);
            gemm(kmat, MatRef::new(&cols, win.col_rows(), win.col_cols()), dst, 0.0);
        }
        let rg = self.rg(&[x, k]);
        self.push("conv2d", Tensor::new(vec![n, cout, ho, wo], out)?, Op::Conv2d { x, k, stride, pad }, rg)
    }

    /// Transposed convolution of `x[n, c_in, h, w]` with `k[c_in, c_out, ks, ks]`,
    /// no padding: output is `((h-1)*stride + ks) x ((w-1)*stride + ks)`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[2] != sk[3] || sx[1] != sk[0] || stride == 0 {
            return Err(shape_err("conv_transpose2d", format!("x {sx:?}, kernel {sk:?}, stride {stride}")));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, ks) = (sk[1], sk[2]);
        let (ho, wo) = ((h - 1) * stride + ks, (w - 1) * stride + ks);
        let win = Window { channels: cout, h: ho, w: wo, k: ks, stride, pad: 0, gh: h, gw: w };
        let mut cols = vec![0.0; win.col_rows() * win.col_cols()];
        let mut out = vec![0.0; n * cout * ho * wo];
        let (vx, vk) = (self.value(x).data(), self.value(k).data());
        let kmat_t = MatRef::new(vk, cin, win.col_rows()).t();
        for (img, dst) in vx.chunks(cin * h * w).zip(out.chunks_mut(cout * ho * wo)) {
            gemm(kmat_t, MatRef::new(img, cin, h * w), &mut cols, 0.0);
            col2im(&cols, &win, dst);
        }
        let rg = self.rg(&[x, k]);
        self.push("conv_transpose2d", Tensor::new(vec![n, cout, ho, wo], out)?, Op::ConvTranspose2d { x, k, stride }, rg)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("narrow", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push("narrow", Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`. Covers transposes,
    /// patch extraction and pixel reordering.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != shape.iter().product::<usize>() || index.iter().any(|&i| i >= src.len()) {
            return Err(shape_err("gather", format!("{} indices into {} values for {shape:?}", index.len(), src.len())));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        self.push("gather", Tensor::new(shape.to_vec(), out)?, Op::Gather { x, index }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    fn norm(
        &mut self,
        name: &'static str,
        x: Var,
        gain: Var,
        bias: Var,
        layout: NormLayout,
        fixed: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; xs.len()];
        let (mut means, mut vars) = (Vec::new(), Vec::new());
        let inv_std: Vec<f64>;
        match layout {
            NormLayout::LastAxis { d } => {
                let mut inv = Vec::with_capacity(xs.len() / d);
                for (row, out) in xs.chunks(d).zip(xhat.chunks_mut(d)) {
                    let m = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    for (o, v) in out.iter_mut().zip(row) {
                        *o = (v - m) * is;
                    }
                    inv.push(is);
                }
                inv_std = inv;
            }
            NormLayout::Channel { n, c, hw } => {
                let count = (n * hw) as f64;
                let mut inv = Vec::with_capacity(c);
                for ch in 0..c {
                    let plane = |b: usize| &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let (m, var) = match fixed {
                        Some((rm, rv)) => (rm[ch], rv[ch]),
                        None => {
                            let m = (0..n).map(|b| plane(b).iter().sum::<f64>()).sum::<f64>() / count;
                            let var = (0..n).map(|b| plane(b).iter().map(|v| (v - m) * (v - m)).sum::<f64>()).sum::<f64>() / count;
                            (m, var)
                        }
                    };
                    let is = 1.0 / (var + eps).sqrt();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in 0..hw {
                            xhat[base + i] = (xs[base + i] - m) * is;
                        }
                    }
                    means.push(m);
                    vars.push(var);
                    inv.push(is);
                }
                inv_std = inv;
            }
        }
        let (g, bvals) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = match layout {
            NormLayout::LastAxis { d } => xhat.iter().enumerate().map(|(i, v)| v * g[i % d] + bvals[i % d]).collect(),
            NormLayout::Channel { c, hw, .. } => {
                xhat.iter().enumerate().map(|(i, v)| v * g[(i / hw) % c] + bvals[(i / hw) % c]).collect()
            }
        };
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        let op = Op::Norm { x, gain, bias, xhat, inv_std, layout, batch_stats: fixed.is_none() };
        let v = self.push(name, t, op, rg)?;
        Ok((v, means, vars))
    }

    /// Layer normalization over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", format!("affine params must be [{d}]")));
        }
        Ok(self.norm("layer_norm", x, gain, bias, NormLayout::LastAxis { d }, None, eps)?.0)
    }

    /// Per-channel normalization of `x[n, c, h, w]`. With `running = None`
    /// the batch statistics are used (and returned so the caller can update
    /// running estimates); otherwise the given (mean, var) are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gain) != [s[1]] || self.shape(bias) != [s[1]] {
            return Err(shape_err("batch_norm", format!("x {s:?} with affine params {:?}", self.shape(gain))));
        }
        if let Some((m, v)) = running {
            if m.len() != s[1] || v.len() != s[1] {
                return Err(shape_err("batch_norm", "running statistics length"));
            }
        }
        let layout = NormLayout::Channel { n: s[0], c: s[1], hw: s[2] * s[3] };
        self.norm("batch_norm", x, gain, bias, layout, running, eps)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `mean(w * (pred - target)^2)`; `target` and `w` are constants.
    pub fn weighted_mse(&mut self, pred: Var, target: &Tensor, weights: Option<&Tensor>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || weights.is_some_and(|w| w.shape() != target.shape()) {
            return Err(shape_err("mse", format!("pred {:?} vs target {:?}", p.shape(), target.shape())));
        }
        let scale = 1.0 / p.numel() as f64;
        let mut acc = 0.0;
        for (i, (a, b)) in p.data().iter().zip(target.data()).enumerate() {
            let w = weights.map_or(1.0, |w| w.data()[i]);
            acc += w * (a - b) * (a - b);
        }
        let rg = self.rg(&[pred]);
        let op = Op::WeightedSse { pred, target: target.clone(), weights: weights.cloned(), scale };
        self.push("mse", Tensor::scalar(acc * scale), op, rg)
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.weighted_mse(pred, target, None)
    }

    /// Op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        let rg = self.rg(inputs);
        self.push("custom", value, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.backward_with(loss, &Tensor::full(self.shape(loss), 1.0))
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `out`) backwards.
    pub fn backward_with(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(shape_err("backward", format!("seed {:?} for output {:?}", seed.shape(), self.shape(out))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        // Lazily allocated accumulator for input `v`; None when `v` needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += sign * d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += s * d);
                }
            }
            Op::AddRowBias(x, b) => {
                let d = self.value(*b).numel();
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
                if let Some(gb) = acc!(*b) {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
                if let Some(gb) = acc!(*b) {
                    for (k, plane) in g.chunks(hw).enumerate() {
                        gb[k % c] += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let gm = MatRef::new(g, m, n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    // ga[m,k] += g[m,n] * B^T where B = b (or b^T)
                    let bt = if *trans_b { MatRef::new(vb, n, k) } else { MatRef::new(vb, k, n).t() };
                    gemm(gm, bt, ga, 1.0);
                }
                if let Some(gb) = acc!(*b) {
                    if *trans_b {
                        // gb[n,k] += g^T a
                        gemm(gm.t(), MatRef::new(va, m, k), gb, 1.0);
                    } else {
                        gemm(MatRef::new(va, m, k).t(), gm, gb, 1.0);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        if y[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = acc!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                if let Some(gx) = acc!(*x) {
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (sx, sk) = (self.shape(*x), self.shape(*k));
                let (cin, h, w) = (sx[1], sx[2], sx[3]);
                let (cout, ks) = (sk[0], sk[2]);
                let so = node.value.shape();
                let win = Window { channels: cin, h, w, k: ks, stride: *stride, pad: *pad, gh: so[2], gw: so[3] };
                let (rows, cols_n) = (win.col_rows(), win.col_cols());
                let (vx, vk) = (self.value(*x).data(), self.value(*k).data());
                let mut cols = vec![0.0; rows * cols_n];
                let want_k = self.nodes[k.0].requires_grad;
                let want_x = self.nodes[x.0].requires_grad;
                let mut gk_local = if want_k { vec![0.0; vk.len()] } else { Vec::new() };
                let mut gx_local = if want_x { vec![0.0; vx.len()] } else { Vec::new() };
                for (b, gout) in g.chunks(cout * cols_n).enumerate() {
                    let gm = MatRef::new(gout, cout, cols_n);
                    if want_k {
                        im2col(&vx[b * cin * h * w..(b + 1) * cin * h * w], &win, &mut cols);
                        gemm(gm, MatRef::new(&cols, rows, cols_n).t(), &mut gk_local, 1.0);
                    }
                    if want_x {
                        gemm(MatRef::new(vk, cout, rows).t(), gm, &mut cols, 0.0);
                        col2im(&cols, &win, &mut gx_local[b * cin * h * w..(b + 1) * cin * h * w]);
                    }
                }
                if let Some(gk) = acc!(*k) {
                    gk.iter_mut().zip(&gk_local).for_each(|(a, v)| *a += v);
                }
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(&gx_local).for_each(|(a, v)| *a += v);
                }
            }
            Op::ConvTranspose2d { x, k, stride } => {
                let (sx, sk) = (self.shape(*x), self.shape(*k));
                let (cin, h, w) = (sx[1], sx[2], sx[3]);
                let (cout, ks) = (sk[1], sk[2]);
                let so = node.value.shape();
                let win = Window { channels: cout, h: so[2], w: so[3], k: ks, stride: *stride, pad: 0, gh: h, gw: w };
                let (rows, cols_n) = (win.col_rows(), win.col_cols());
                let (vx, vk) = (self.value(*x).data(), self.value(*k).data());
                let want_k = self.nodes[k.0].requires_grad;
                let want_x = self.nodes[x.0].requires_grad;
                let mut dcols = vec![0.0; rows * cols_n];
                let mut gk_local = if want_k { vec![0.0; vk.len()] } else { Vec::new() };
                let mut gx_local = if want_x { vec![0.0; vx.len()] } else { Vec::new() };
                for (b, gout) in g.chunks(cout * so[2] * so[3]).enumerate() {
                    im2col(gout, &win, &mut dcols);
                    let dc = MatRef::new(&dcols, rows, cols_n);
                    if want_x {
                        gemm(MatRef::new(vk, cin, rows), dc, &mut gx_local[b * cin * cols_n..(b + 1) * cin * cols_n], 1.0);
                    }
                    if want_k {
                        gemm(MatRef::new(&vx[b * cin * cols_n..(b + 1) * cin * cols_n], cin, cols_n), dc.t(), &mut gk_local, 1.0);
                    }
                }
                if let Some(gk) = acc!(*k) {
                    gk.iter_mut().zip(&gk_local).for_each(|(a, v)| *a += v);
                }
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(&gx_local).for_each(|(a, v)| *a += v);
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = acc!(*x) {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let d = self.shape(v)[*axis];
                    if let Some(gv) = acc!(v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            gv[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                        }
                    }
                    offset += d;
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = acc!(*x) {
                    for (k, &src) in index.iter().enumerate() {
                        gx[src] += g[k];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            Op::Norm { x, gain, bias, xhat, inv_std, layout, batch_stats } => {
                let gv = self.value(*gain).data();
                let group_of = |k: usize| -> usize {
                    match *layout {
                        NormLayout::LastAxis { d } => k % d,
                        NormLayout::Channel { c, hw, .. } => (k / hw) % c,
                    }
                };
                if let Some(gg) = acc!(*gain) {
                    for k in 0..g.len() {
                        gg[group_of(k)] += g[k] * xhat[k];
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for k in 0..g.len() {
                        gb[group_of(k)] += g[k];
                    }
                }
                if let Some(gx) = acc!(*x) {
                    match *layout {
                        NormLayout::LastAxis { d } => {
                            for (r, ((gr, xr), out)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                                let (mut s1, mut s2) = (0.0, 0.0);
                                for j in 0..d {
                                    let dxh = gr[j] * gv[j];
                                    s1 += dxh;
                                    s2 += dxh * xr[j];
                                }
                                let f = inv_std[r] / d as f64;
                                for j in 0..d {
                                    out[j] += f * (d as f64 * gr[j] * gv[j] - s1 - xr[j] * s2);
                                }
                            }
                        }
                        NormLayout::Channel { n, c, hw } => {
                            let count = (n * hw) as f64;
                            debug_assert_eq!(layout.groups(), c);
                            for ch in 0..c {
                                let idx = |b: usize, i: usize| (b * c + ch) * hw + i;
                                if *batch_stats {
                                    let (mut s1, mut s2) = (0.0, 0.0);
                                    for b in 0..n {
                                        for i in 0..hw {
                                            let k = idx(b, i);
                                            let dxh = g[k] * gv[ch];
                                            s1 += dxh;
                                            s2 += dxh * xhat[k];
                                        }
                                    }
                                    let f = inv_std[ch] / count;
                                    for b in 0..n {
                                        for i in 0..hw {
                                            let k = idx(b, i);
                                            gx[k] += f * (count * g[k] * gv[ch] - s1 - xhat[k] * s2);
                                        }
                                    }
                                } else {
                                    for b in 0..n {
                                        for i in 0..hw {
                                            let k = idx(b, i);
                                            gx[k] += g[k] * gv[ch] * inv_std[ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::WeightedSse { pred, target, weights, scale } => {
                let p = self.value(*pred).data();
                if let Some(gp) = acc!(*pred) {
                    for k in 0..p.len() {
                        let w = weights.as_ref().map_or(1.0, |w| w.data()[k]);
                        gp[k] += g[0] * scale * 2.0 * w * (p[k] - target.data()[k]);
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let local = backward(&vals, &node.value, g);
                for (&v, gl) in inputs.iter().zip(local) {
                    if let Some(gv) = acc!(v) {
                        gv.iter_mut().zip(&gl).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, if `v` lies upstream of the seed and needs one.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter used in the graph, aligned with `store`.
    pub fn params(&self, store: &ParamStore) -> ParamGrads {
        let mut out = store.zero_grads();
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                out[id.index()] = Some(g.to_vec());
            }
        }
        out
    }
}
