use std::rc::Rc;

use super::{ArchConfig, ArchKind, Batch, Result, TemporalMode};
use crate::rng::SplitMix64;
use crate::tensor::nn::{BatchNorm2d, Conv, ConvLstmCell, ConvT, Ctx, Dense, EncoderBlock, LayerNorm, LstmCell};
use crate::tensor::{self, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct CnnLstm {
    conv1: Conv,
    conv2: Conv,
    lstm: LstmCell,
    head: Dense,
}

#[derive(Debug, Clone)]
pub struct ConvLstmNet {
    cell1: ConvLstmCell,
    bn1: BatchNorm2d,
    cell2: ConvLstmCell,
    bn2: BatchNorm2d,
    up: ConvT,
}

#[derive(Debug, Clone)]
pub struct Vit {
    embed: Dense,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
    head: Dense,
}

#[derive(Debug, Clone)]
pub struct GeoStaNet {
    embed: Dense,
    pos: ParamId,
    frame_pos: Option<ParamId>,
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
    up: ConvT,
    /// `[2, d]`, applied to normalized patch-centre coordinates.
    pub w_geo: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub enum Net {
    CnnLstm(CnnLstm),
    ConvLstm(ConvLstmNet),
    Vit(Vit),
    GeoStaNet(GeoStaNet),
}

fn blocks(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut SplitMix64) -> tensor::Result<Vec<EncoderBlock>> {
    (0..cfg.layers).map(|l| EncoderBlock::new(store, &format!("enc{l}"), cfg.d, cfg.heads, rng)).collect()
}

fn small(rng: &mut SplitMix64, shape: &[usize], sd: f64) -> Tensor {
    Tensor::from_fn(shape, |_| sd * rng.normal())
}

impl Net {
    pub fn build(cfg: &ArchConfig, store: &mut ParamStore) -> Result<Net> {
        cfg.validate()?;
        let mut rng = SplitMix64::stream(cfg.seed, 0xa4c5);
        let [h, w] = cfg.coarse;
        let [hf, wf] = cfg.fine();
        let (ks, c) = (cfg.kernel(), cfg.channels);
        let patch_dim = c * cfg.patch * cfg.patch;
        Ok(match cfg.kind {
            ArchKind::CnnLstm => {
                let cc = cfg.conv_channels;
                Net::CnnLstm(CnnLstm {
                    conv1: Conv::new(store, "conv1", c, cc, ks, &mut rng),
                    conv2: Conv::new(store, "conv2", cc, cc, ks, &mut rng),
                    lstm: LstmCell::new(store, "lstm", cc * h * w, cfg.hidden, &mut rng),
                    head: Dense::new(store, "head", cfg.hidden, hf * wf, &mut rng),
                })
            }
            ArchKind::ConvLstm => {
                let hd = cfg.convlstm_hidden;
                Net::ConvLstm(ConvLstmNet {
                    cell1: ConvLstmCell::new(store, "cell1", c, hd, ks, &mut rng),
                    bn1: BatchNorm2d::new(store, "bn1", hd),
                    cell2: ConvLstmCell::new(store, "cell2", hd, hd, ks, &mut rng),
                    bn2: BatchNorm2d::new(store, "bn2", hd),
                    up: ConvT::new(store, "up", hd, 1, cfg.factor, &mut rng),
                })
            }
            ArchKind::Vit => {
                let pf = cfg.patch * cfg.factor;
                Net::Vit(Vit {
                    embed: Dense::new(store, "embed", patch_dim, cfg.d, &mut rng),
                    pos: store.add("pos", small(&mut rng, &[cfg.tokens(), cfg.d], 0.02)),
                    blocks: blocks(store, cfg, &mut rng)?,
                    ln: LayerNorm::new(store, "ln", cfg.d),
                    head: Dense::new(store, "head", cfg.d, pf * pf, &mut rng),
                })
            }
            ArchKind::Geostanet => {
                let embed = Dense::new(store, "embed", patch_dim, cfg.d, &mut rng);
                let pos = store.add("pos", small(&mut rng, &[cfg.tokens(), cfg.d], 0.02));
                let blocks = blocks(store, cfg, &mut rng)?;
                let ln = LayerNorm::new(store, "ln", cfg.d);
                let up = ConvT::new(store, "up", cfg.d, 1, cfg.patch * cfg.factor, &mut rng);
                let frame_pos = (cfg.temporal == TemporalMode::FullSequence)
                    .then(|| store.add("frame_pos", small(&mut rng, &[cfg.t, cfg.d], 0.02)));
                // Created last so the remaining initialization does not depend on `geo`.
                let w_geo = cfg.geo.then(|| store.add("w_geo", small(&mut rng, &[2, cfg.d], 0.5)));
                Net::GeoStaNet(GeoStaNet { embed, pos, frame_pos, blocks, ln, up, w_geo })
            }
        })
    }

    /// Network output `[n, 1, hf, wf]` before the residual baseline is added.
    pub fn forward(&self, cx: &mut Ctx, cfg: &ArchConfig, batch: &Batch) -> tensor::Result<Var> {
        let frames: Vec<Var> = batch.frames.iter().map(|f| cx.g.constant(f.clone())).collect::<tensor::Result<_>>()?;
        match self {
            Net::CnnLstm(m) => m.forward(cx, cfg, &frames, batch.n),
            Net::ConvLstm(m) => m.forward(cx, cfg, &frames, batch.n),
            Net::Vit(m) => m.forward(cx, cfg, &frames, batch.n),
            Net::GeoStaNet(m) => {
                let coords = cx.g.constant(batch.coords.clone())?;
                m.forward(cx, cfg, &frames, coords, batch.n)
            }
        }
    }

    pub fn geo_weight(&self) -> Option<ParamId> {
        match self {
            Net::GeoStaNet(m) => m.w_geo,
            _ => None,
        }
    }
}

fn cat0(cx: &mut Ctx, xs: &[Var]) -> tensor::Result<Var> {
    if xs.len() == 1 {
        Ok(xs[0])
    } else {
        cx.g.concat(xs, 0)
    }
}

impl CnnLstm {
    fn forward(&self, cx: &mut Ctx, cfg: &ArchConfig, frames: &[Var], n: usize) -> tensor::Result<Var> {
        let [h, w] = cfg.coarse;
        let [hf, wf] = cfg.fine();
        let x = cat0(cx, frames)?;
        let y = self.conv1.forward(cx, x)?;
        let y = cx.g.relu(y)?;
        let y = self.conv2.forward(cx, y)?;
        let y = cx.g.relu(y)?;
        let feat = cx.g.reshape(y, &[frames.len() * n, cfg.conv_channels * h * w])?;
        let mut hs = cx.g.constant(Tensor::zeros(&[n, cfg.hidden]))?;
        let mut cs = hs;
        for f in 0..frames.len() {
            let xf = cx.g.narrow(feat, 0, f * n, n)?;
            (hs, cs) = self.lstm.forward(cx, xf, hs, cs)?;
        }
        let out = self.head.forward(cx, hs)?;
        cx.g.reshape(out, &[n, 1, hf, wf])
    }
}

impl ConvLstmNet {
    fn forward(&self, cx: &mut Ctx, cfg: &ArchConfig, frames: &[Var], n: usize) -> tensor::Result<Var> {
        let [h, w] = cfg.coarse;
        let hd = cfg.convlstm_hidden;
        let zero = cx.g.constant(Tensor::zeros(&[n, hd, h, w]))?;
        let (mut h1, mut c1) = (zero, zero);
        let mut outs = Vec::with_capacity(frames.len());
        for &x in frames {
            (h1, c1) = self.cell1.forward(cx, x, h1, c1)?;
            outs.push(h1);
        }
        let stacked = cat0(cx, &outs)?;
        let normed = self.bn1.forward(cx, stacked)?;
        let (mut h2, mut c2) = (zero, zero);
        for f in 0..frames.len() {
            let x = cx.g.narrow(normed, 0, f * n, n)?;
            (h2, c2) = self.cell2.forward(cx, x, h2, c2)?;
        }
        let y = self.bn2.forward(cx, h2)?;
        self.up.forward(cx, y)
    }
}

/// Index map from `[n, c, h, w]` to patch rows `[n * tokens, c * p * p]`.
fn patchify_index(n: usize, c: usize, h: usize, w: usize, p: usize) -> Rc<Vec<usize>> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(((b * c + ch) * h + gy * p + py) * w + gx * p + px);
                        }
                    }
                }
            }
        }
    }
    Rc::new(idx)
}

/// Index map that tiles a `[rows, d]` table `times` times.
fn tile_index(rows: usize, d: usize, times: usize) -> Rc<Vec<usize>> {
    Rc::new((0..times).flat_map(|_| 0..rows * d).collect())
}

fn embed_frames(
    cx: &mut Ctx,
    cfg: &ArchConfig,
    embed: &Dense,
    pos: ParamId,
    frames: &[Var],
    n: usize,
) -> tensor::Result<Vec<Var>> {
    let [h, w] = cfg.coarse;
    let (tok, d, pd) = (cfg.tokens(), cfg.d, cfg.channels * cfg.patch * cfg.patch);
    let pidx = patchify_index(n, cfg.channels, h, w, cfg.patch);
    let pos = cx.p(pos);
    let pos = cx.g.gather(pos, tile_index(tok, d, n), &[n * tok, d])?;
    frames
        .iter()
        .map(|&f| {
            let patches = cx.g.gather(f, pidx.clone(), &[n * tok, pd])?;
            let z = embed.forward(cx, patches)?;
            cx.g.add(z, pos)
        })
        .collect()
}

fn encode(cx: &mut Ctx, blocks: &[EncoderBlock], mut x: Var, batch: usize, len: usize) -> tensor::Result<Var> {
    for b in blocks {
        x = b.forward(cx, x, batch, len)?;
    }
    Ok(x)
}

impl Vit {
    fn forward(&self, cx: &mut Ctx, cfg: &ArchConfig, frames: &[Var], n: usize) -> tensor::Result<Var> {
        let tok = cfg.tokens();
        let z = embed_frames(cx, cfg, &self.embed, self.pos, frames, n)?;
        let all = cat0(cx, &z)?;
        let enc = encode(cx, &self.blocks, all, frames.len() * n, tok)?;
        let per: Vec<Var> =
            (0..frames.len()).map(|f| cx.g.narrow(enc, 0, f * n * tok, n * tok)).collect::<tensor::Result<_>>()?;
        let pooled = if per.len() == 1 { per[0] } else { cx.g.mean_of(&per)? };
        let y = self.ln.forward(cx, pooled)?;
        let y = self.head.forward(cx, y)?;
        let [hf, wf] = cfg.fine();
        let pf = cfg.patch * cfg.factor;
        let gw = wf / pf;
        let mut idx = Vec::with_capacity(n * hf * wf);
        for b in 0..n {
            for yy in 0..hf {
                for xx in 0..wf {
                    let t = b * tok + (yy / pf) * gw + xx / pf;
                    idx.push(t * pf * pf + (yy % pf) * pf + xx % pf);
                }
            }
        }
        cx.g.gather(y, Rc::new(idx), &[n, 1, hf, wf])
    }
}

impl GeoStaNet {
    fn forward(&self, cx: &mut Ctx, cfg: &ArchConfig, frames: &[Var], coords: Var, n: usize) -> tensor::Result<Var> {
        let (tok, d) = (cfg.tokens(), cfg.d);
        let mut z = embed_frames(cx, cfg, &self.embed, self.pos, frames, n)?;
        if let Some(wg) = self.w_geo {
            let wg = cx.p(wg);
            let geo = cx.g.matmul(coords, wg)?;
            for zt in z.iter_mut() {
                *zt = cx.g.add(*zt, geo)?;
            }
        }
        let hidden = match cfg.temporal {
            TemporalMode::Literal => {
                let mut hs = encode(cx, &self.blocks, z[0], n, tok)?;
                for _ in 1..z.len() {
                    hs = encode(cx, &self.blocks, hs, n, tok)?;
                }
                hs
            }
            TemporalMode::Injected => {
                let mut hs = encode(cx, &self.blocks, z[0], n, tok)?;
                for &zt in &z[1..] {
                    let x = cx.g.add(hs, zt)?;
                    hs = encode(cx, &self.blocks, x, n, tok)?;
                }
                hs
            }
            TemporalMode::FullSequence => {
                let t = z.len();
                let fp = cx.p(self.frame_pos.expect("frame embedding"));
                for (f, zt) in z.iter_mut().enumerate() {
                    let idx: Vec<usize> = (0..n * tok).flat_map(|_| f * d..(f + 1) * d).collect();
                    let row = cx.g.gather(fp, Rc::new(idx), &[n * tok, d])?;
                    *zt = cx.g.add(*zt, row)?;
                }
                // Frame-major rows to one sequence of t * tok tokens per sample.
                let all = cat0(cx, &z)?;
                let mut idx = Vec::with_capacity(n * t * tok * d);
                for b in 0..n {
                    for f in 0..t {
                        for k in 0..tok {
                            idx.extend(((f * n + b) * tok + k) * d..((f * n + b) * tok + k + 1) * d);
                        }
                    }
                }
                let seq = cx.g.gather(all, Rc::new(idx), &[n * t * tok, d])?;
                let enc = encode(cx, &self.blocks, seq, n, t * tok)?;
                let mut keep = Vec::with_capacity(n * tok * d);
                for b in 0..n {
                    let start = (b * t + t - 1) * tok * d;
                    keep.extend(start..start + tok * d);
                }
                cx.g.gather(enc, Rc::new(keep), &[n * tok, d])?
            }
        };
        let y = self.ln.forward(cx, hidden)?;
        let [h, w] = cfg.coarse;
        let (gh, gw) = (h / cfg.patch, w / cfg.patch);
        let mut idx = Vec::with_capacity(n * d * tok);
        for b in 0..n {
            for ch in 0..d {
                for k in 0..gh * gw {
                    idx.push((b * tok + k) * d + ch);
                }
            }
        }
        let grid = cx.g.gather(y, Rc::new(idx), &[n, d, gh, gw])?;
        self.up.forward(cx, grid)
    }
}
