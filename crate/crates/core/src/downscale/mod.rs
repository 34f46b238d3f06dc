//! Coarse-to-fine downscaling networks: CNN-LSTM, ConvLSTM, a Vision
//! Transformer and GeoSTANet, with a shared trainer and evaluator.
//!
//! All networks see a standardized window of `t` coarse frames and predict
//! the fine field of the last frame. By default they predict a correction on
//! top of the bilinear upsampling of that frame.

mod arch;
mod data;
mod loss;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geogrid::GridError;
use crate::metrics::MetricError;
use crate::tensor::nn::Ctx;
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, TensorError};

pub use arch::Net;
pub use data::{benchmark_pair, build_dataset, Batch, Dataset, Scaler, Split};
pub use loss::{imbalance_weights, imbalance_weighted_mse};
pub use train::{evaluate, predict_cube, train, validation_mse, write_train_log, EpochLog, LossKind, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum DownscaleError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T, E = DownscaleError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    CnnLstm,
    ConvLstm,
    Vit,
    Geostanet,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [ArchKind::CnnLstm, ArchKind::ConvLstm, ArchKind::Vit, ArchKind::Geostanet];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::CnnLstm => "cnn_lstm",
            ArchKind::ConvLstm => "convlstm",
            ArchKind::Vit => "vit",
            ArchKind::Geostanet => "geostanet",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = DownscaleError;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| DownscaleError::Config(format!("unknown architecture '{s}' (cnn_lstm, convlstm, vit, geostanet)")))
    }
}

/// How GeoSTANet carries information across frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// `H_0 = Enc(Z_0)`, `H_t = Enc(H_{t-1})`: only the first frame enters.
    Literal,
    /// `H_t = Enc(H_{t-1} + Z_t)`: every frame is added before its encoder pass.
    Injected,
    /// One encoder pass over the tokens of all frames; the last frame's tokens are kept.
    FullSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub kind: ArchKind,
    /// Coarse grid `[h, w]`.
    pub coarse: [usize; 2],
    pub factor: usize,
    /// Frames per sample.
    pub t: usize,
    pub channels: usize,
    /// Kernel radius; kernels are `(2p+1) x (2p+1)`.
    pub p: usize,
    /// LSTM hidden size (CNN-LSTM).
    pub hidden: usize,
    /// Feature maps of the CNN-LSTM conv stack.
    pub conv_channels: usize,
    /// Hidden channels of each ConvLSTM layer.
    pub convlstm_hidden: usize,
    /// Patch edge on the coarse grid (ViT, GeoSTANet).
    pub patch: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub temporal: TemporalMode,
    /// GeoSTANet coordinate encoding; off gives the plain recurrent transformer.
    pub geo: bool,
    /// Add the bilinear upsampling of the last frame to the network output.
    pub residual: bool,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: ArchKind::Geostanet,
            coarse: [16, 16],
            factor: 4,
            t: 4,
            channels: 1,
            p: 1,
            hidden: 32,
            conv_channels: 8,
            convlstm_hidden: 8,
            patch: 4,
            d: 64,
            heads: 4,
            layers: 2,
            temporal: TemporalMode::Injected,
            geo: true,
            residual: true,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn desk(kind: ArchKind) -> Self {
        Self { kind, ..Self::default() }
    }

    /// Small configuration for gradient checks: 8x8 coarse, t = 2.
    pub fn miniature(kind: ArchKind) -> Self {
        Self {
            kind,
            coarse: [8, 8],
            factor: 2,
            t: 2,
            hidden: 4,
            conv_channels: 2,
            convlstm_hidden: 2,
            patch: 4,
            d: 16,
            heads: 2,
            layers: 1,
            ..Self::default()
        }
    }

    pub fn fine(&self) -> [usize; 2] {
        [self.coarse[0] * self.factor, self.coarse[1] * self.factor]
    }

    pub fn kernel(&self) -> usize {
        2 * self.p + 1
    }

    pub fn tokens(&self) -> usize {
        (self.coarse[0] / self.patch) * (self.coarse[1] / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DownscaleError::Config(m));
        if self.factor < 2 {
            return bad(format!("upsample factor must be >= 2, got {}", self.factor));
        }
        if self.t == 0 || self.channels == 0 || self.coarse.contains(&0) {
            return bad("t, channels and grid size must be positive".into());
        }
        match self.kind {
            ArchKind::CnnLstm if self.hidden == 0 || self.conv_channels == 0 => bad("hidden sizes must be positive".into()),
            ArchKind::ConvLstm if self.convlstm_hidden == 0 => bad("hidden sizes must be positive".into()),
            ArchKind::Vit | ArchKind::Geostanet => {
                if self.patch == 0 || self.coarse[0] % self.patch != 0 || self.coarse[1] % self.patch != 0 {
                    return bad(format!("patch {} does not divide the coarse grid {:?}", self.patch, self.coarse));
                }
                if self.heads == 0 || self.d % self.heads != 0 {
                    return bad(format!("d = {} is not divisible by {} heads", self.d, self.heads));
                }
                if self.layers == 0 {
                    return bad("at least one encoder layer is required".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Domain bounds used to map patch-centre coordinates to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordBounds {
    pub lat: [f64; 2],
    pub lon: [f64; 2],
}

impl CoordBounds {
    pub fn normalize(&self, lat: f64, lon: f64) -> [f64; 2] {
        let f = |v: f64, [lo, hi]: [f64; 2]| if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 };
        [f(lat, self.lat), f(lon, self.lon)]
    }
}

/// A network with its parameters and the data transforms it was trained with.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ArchConfig,
    pub store: ParamStore,
    pub net: Net,
    pub scaler: Scaler,
    pub bounds: CoordBounds,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ArchConfig,
    scaler: Scaler,
    bounds: CoordBounds,
}

impl Model {
    pub fn new(config: ArchConfig, scaler: Scaler, bounds: CoordBounds) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = Net::build(&config, &mut store)?;
        Ok(Self { config, store, net, scaler, bounds })
    }

    /// Standardized prediction `[n, 1, hf, wf]` for a batch.
    pub fn forward(&self, cx: &mut Ctx, batch: &Batch) -> crate::tensor::Result<crate::tensor::Var> {
        let out = self.net.forward(cx, &self.config, batch)?;
        if self.config.residual {
            let base = cx.g.constant(batch.baseline.clone())?;
            cx.g.add(out, base)
        } else {
            Ok(out)
        }
    }

    /// Prediction in physical units, one `hf * wf` field per sample.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let y = self.forward(&mut cx, batch)?;
        let hw = self.config.fine()[0] * self.config.fine()[1];
        Ok(g.value(y).data().chunks(hw).map(|c| c.iter().map(|&v| self.scaler.inverse(v)).collect()).collect())
    }

    pub fn save(&self, dir: &Path, step: u64) -> Result<()> {
        let meta = ModelMeta {
            kind: "downscaler".into(),
            config: self.config.clone(),
            scaler: self.scaler,
            bounds: self.bounds,
        };
        let extra = serde_json::to_value(&meta).map_err(|e| DownscaleError::Config(e.to_string()))?;
        Ok(save_checkpoint(dir, &self.store, self.config.seed, step, extra)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let raw = std::fs::read(dir.join("manifest.json"))
            .map_err(|e| DownscaleError::Data(format!("{}: {e}", dir.join("manifest.json").display())))?;
        let manifest: serde_json::Value = serde_json::from_slice(&raw).map_err(|e| DownscaleError::Data(e.to_string()))?;
        let meta: ModelMeta = serde_json::from_value(manifest["extra"].clone())
            .map_err(|e| DownscaleError::Data(format!("not a downscaler checkpoint: {e}")))?;
        let mut model = Model::new(meta.config, meta.scaler, meta.bounds)?;
        load_checkpoint(dir, &mut model.store)?;
        Ok(model)
    }
}

/// Bilinear weights for upsampling by `factor` between block-centre grids,
/// clamped at the edges. Returns `(lo, hi, frac)` per fine index.
pub(crate) fn upsample_stencil(n_coarse: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_coarse * factor)
        .map(|i| {
            // Fine node i sits at coarse coordinate (i + 0.5) / factor - 0.5.
            let x = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_coarse - 1) as f64);
            let lo = (x.floor() as usize).min(n_coarse.saturating_sub(2));
            let hi = (lo + 1).min(n_coarse - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling of one `h x w` field.
pub fn upsample_bilinear(field: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (sy, sx) = (upsample_stencil(h, factor), upsample_stencil(w, factor));
    let mut out = Vec::with_capacity(h * w * factor * factor);
    for &(y0, y1, fy) in &sy {
        for &(x0, x1, fx) in &sx {
            let top = field[y0 * w + x0] * (1.0 - fx) + field[y0 * w + x1] * fx;
            let bot = field[y1 * w + x0] * (1.0 - fx) + field[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Checks shared by tests and the acceptance harness: a random batch for `cfg`.
pub fn random_batch(cfg: &ArchConfig, n: usize, seed: u64) -> Batch {
    let mut rng = crate::rng::SplitMix64::new(seed);
    let [h, w] = cfg.coarse;
    let [hf, wf] = cfg.fine();
    let frames = (0..cfg.t).map(|_| Tensor::from_fn(&[n, cfg.channels, h, w], |_| rng.uniform(-1.0, 1.0))).collect();
    let (gh, gw) = (h / cfg.patch.max(1), w / cfg.patch.max(1));
    let coords = Tensor::from_fn(&[n * gh * gw, 2], |_| rng.uniform(-1.0, 1.0));
    Batch {
        frames,
        baseline: Tensor::from_fn(&[n, 1, hf, wf], |_| rng.uniform(-1.0, 1.0)),
        target: Tensor::from_fn(&[n, 1, hf, wf], |_| rng.uniform(-1.0, 1.0)),
        coords,
        n,
    }
}
