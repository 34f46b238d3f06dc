//! Layers built from graph ops. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and runs inside a [`Ctx`].

use super::graph::{Graph, Padding, Var};
use super::params::{ParamId, ParamStore};
use super::{shape_err, Result, Tensor};
use crate::rng::SplitMix64;

/// One forward pass: the graph, the parameters, the mode, and the
/// buffer updates (batch-norm running statistics) produced in training mode.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    pub updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, train: bool) -> Self {
        Self { g, store, train, updates: Vec::new() }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

/// Write buffer updates collected by a training-mode forward pass.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, t) in updates {
        store.set(id, t)?;
    }
    Ok(())
}

/// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn he_uniform(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
    let lim = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-lim, lim))
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w: store.add(format!("{name}.w"), he_uniform(rng, &[din, dout], din)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.g.dense(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub k: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    /// Same-padded, stride-1 convolution with bias.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, ks: usize, rng: &mut SplitMix64) -> Self {
        Self {
            k: store.add(format!("{name}.k"), he_uniform(rng, &[cout, cin, ks, ks], cin * ks * ks)),
            b: Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout]))),
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, cin: usize, cout: usize, ks: usize, rng: &mut SplitMix64) -> Self {
        Self {
            k: store.add(format!("{name}.k"), he_uniform(rng, &[cout, cin, ks, ks], cin * ks * ks)),
            b: None,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let k = cx.p(self.k);
        let y = cx.g.conv2d(x, k, self.stride, self.padding)?;
        match self.b {
            Some(b) => {
                let b = cx.p(b);
                cx.g.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvT {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvT {
    /// `ks = stride` gives a non-overlapping upsample by `stride`.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut SplitMix64) -> Self {
        Self {
            k: store.add(format!("{name}.k"), he_uniform(rng, &[cin, cout, stride, stride], cin)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (k, b) = (cx.p(self.k), cx.p(self.b));
        let y = cx.g.conv_transpose2d(x, k, self.stride)?;
        cx.g.add_channel_bias(y, b)
    }
}

/// Split `[.., 4H, ..]` gate pre-activations into (i, f, o, g) and apply the
/// LSTM update.
fn lstm_update(g: &mut Graph, z: Var, c_prev: Var, hidden: usize, axis: usize) -> Result<(Var, Var)> {
    let zi = g.narrow(z, axis, 0, hidden)?;
    let zf = g.narrow(z, axis, hidden, hidden)?;
    let zo = g.narrow(z, axis, 2 * hidden, hidden)?;
    let zg = g.narrow(z, axis, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let o = g.sigmoid(zo)?;
    let cand = g.tanh(zg)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Gates in order i, f, o, g: `z = x W + h U + b`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w: store.add(format!("{name}.w"), he_uniform(rng, &[din, 4 * hidden], din)),
            u: store.add(format!("{name}.u"), he_uniform(rng, &[hidden, 4 * hidden], hidden)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// `x[n, din]`, `h[n, H]`, `c[n, H]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = cx.g.shape(x)[0];
        if cx.g.shape(h) != [n, self.hidden] || cx.g.shape(c) != [n, self.hidden] {
            return Err(shape_err("lstm_cell", format!("state {:?} for batch {n}, hidden {}", cx.g.shape(h), self.hidden)));
        }
        let (w, u, b) = (cx.p(self.w), cx.p(self.u), cx.p(self.b));
        let xw = cx.g.matmul(x, w)?;
        let hu = cx.g.matmul(h, u)?;
        let z = cx.g.add(xw, hu)?;
        let z = cx.g.add_row_bias(z, b)?;
        lstm_update(cx.g, z, c, self.hidden, 1)
    }
}

/// LSTM cell whose input and recurrent transforms are same-padded convolutions.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, ks: usize, rng: &mut SplitMix64) -> Self {
        Self {
            wx: store.add(format!("{name}.wx"), he_uniform(rng, &[4 * hidden, cin, ks, ks], cin * ks * ks)),
            wh: store.add(format!("{name}.wh"), he_uniform(rng, &[4 * hidden, hidden, ks, ks], hidden * ks * ks)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// `x[n, cin, h, w]`, state `[n, H, h, w]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (wx, wh, b) = (cx.p(self.wx), cx.p(self.wh), cx.p(self.b));
        let zx = cx.g.conv2d(x, wx, 1, Padding::Same)?;
        let zh = cx.g.conv2d(h, wh, 1, Padding::Same)?;
        let z = cx.g.add(zx, zh)?;
        let z = cx.g.add_channel_bias(z, b)?;
        lstm_update(cx.g, z, c, self.hidden, 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm2d {
    pub gain: ParamId,
    pub bias: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    /// Running estimate update: `r = momentum * r + (1 - momentum) * batch`.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[c], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c])),
            mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (gain, bias) = (cx.p(self.gain), cx.p(self.bias));
        if !cx.train {
            let (rm, rv) = (cx.store.get(self.mean).data(), cx.store.get(self.var).data());
            return Ok(cx.g.batch_norm(x, gain, bias, Some((rm, rv)), self.eps)?.0);
        }
        let (y, bm, bv) = cx.g.batch_norm(x, gain, bias, None, self.eps)?;
        let mix = |old: &Tensor, new: &[f64]| {
            let data = old.data().iter().zip(new).map(|(o, n)| self.momentum * o + (1.0 - self.momentum) * n).collect();
            Tensor::from_vec(data)
        };
        let (m, v) = (mix(cx.store.get(self.mean), &bm), mix(cx.store.get(self.var), &bv));
        cx.updates.push((self.mean, m));
        cx.updates.push((self.var, v));
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gain), cx.p(self.bias));
        cx.g.layer_norm(x, g, b, 1e-5)
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V`; returns (output, attention weights).
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(shape_err("attention", format!("Q {sq:?}, K {sk:?}, V {sv:?}")));
    }
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / (sq[1] as f64).sqrt())?;
    let a = g.softmax(s)?;
    Ok((g.matmul(a, v)?, a))
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("d = {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Dense::new(store, &format!("{name}.q"), d, d, rng),
            k: Dense::new(store, &format!("{name}.k"), d, d, rng),
            v: Dense::new(store, &format!("{name}.v"), d, d, rng),
            o: Dense::new(store, &format!("{name}.o"), d, d, rng),
            heads,
            d,
        })
    }

    /// Self-attention over `batch` independent sequences of `len` tokens
    /// stacked as `x[batch * len, d]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, batch: usize, len: usize) -> Result<Var> {
        if cx.g.shape(x) != [batch * len, self.d] {
            return Err(shape_err("attention", format!("x {:?} for {batch} x {len} tokens of {}", cx.g.shape(x), self.d)));
        }
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let dh = self.d / self.heads;
        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let (qb, kb, vb) = (cx.g.narrow(q, 0, b * len, len)?, cx.g.narrow(k, 0, b * len, len)?, cx.g.narrow(v, 0, b * len, len)?);
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = cx.g.narrow(qb, 1, h * dh, dh)?;
                let kh = cx.g.narrow(kb, 1, h * dh, dh)?;
                let vh = cx.g.narrow(vb, 1, h * dh, dh)?;
                heads.push(attention(cx.g, qh, kh, vh)?.0);
            }
            rows.push(if heads.len() == 1 { heads[0] } else { cx.g.concat(&heads, 1)? });
        }
        let cat = if rows.len() == 1 { rows[0] } else { cx.g.concat(&rows, 0)? };
        self.o.forward(cx, cat)
    }
}

/// Pre-norm transformer encoder block with a `d -> 2d -> d` ReLU MLP.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Dense::new(store, &format!("{name}.fc1"), d, 2 * d, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), 2 * d, d, rng),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, batch: usize, len: usize) -> Result<Var> {
        let n = self.ln1.forward(cx, x)?;
        let a = self.attn.forward(cx, n, batch, len)?;
        let x = cx.g.add(x, a)?;
        let n = self.ln2.forward(cx, x)?;
        let m = self.fc1.forward(cx, n)?;
        let m = cx.g.relu(m)?;
        let m = self.fc2.forward(cx, m)?;
        cx.g.add(x, m)
    }
}
