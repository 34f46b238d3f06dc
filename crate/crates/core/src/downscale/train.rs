use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{imbalance_weighted_mse, ArchKind, Dataset, DownscaleError, Model, Result, Split};
use crate::geogrid::{DataCube, Season, ZoneMask, ZoneScope};
use crate::metrics::{full_report, MetricError, ReportRow};
use crate::rng::SplitMix64;
use crate::tensor::nn::{apply_updates, Ctx};
use crate::tensor::{Graph, Optimizer, OptimizerKind, ParamStore, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Imbalance { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// `None`: imbalance-weighted (alpha = 0.5) for GeoSTANet, MSE otherwise.
    pub loss: Option<LossKind>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch: 8, lr: 3e-3, optimizer: OptimizerKind::adam(), loss: None, patience: None, seed: 0 }
    }
}

impl TrainConfig {
    pub fn loss_for(&self, kind: ArchKind) -> LossKind {
        self.loss.unwrap_or(match kind {
            ArchKind::Geostanet => LossKind::Imbalance { alpha: 0.5 },
            _ => LossKind::Mse,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Standardized MSE on the validation split.
    pub val_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Standardized MSE of `model` over `idx`, in eval mode.
pub fn validation_mse(model: &Model, ds: &Dataset, idx: &[usize], batch: usize) -> Result<f64> {
    let (mut acc, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(batch.max(1)) {
        let b = ds.batch(chunk, &model.config, &model.scaler, &model.bounds);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.store, false);
        let y = model.forward(&mut cx, &b)?;
        let l = g.mse(y, &b.target)?;
        acc += g.value(l).item() * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count > 0 { acc / count as f64 } else { f64::NAN })
}

fn diverged(epoch: usize, e: impl ToString) -> DownscaleError {
    DownscaleError::Diverged { epoch, detail: e.to_string() }
}

/// Train in place. The best-validation parameters are kept; on divergence
/// they are restored before the error is returned.
pub fn train(model: &mut Model, ds: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<TrainReport> {
    ds.check_compatible(&model.config)?;
    if split.train.is_empty() {
        return Err(DownscaleError::Data("empty training split".into()));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(DownscaleError::Config("batch and lr must be positive".into()));
    }
    let loss_kind = cfg.loss_for(model.config.kind);
    let val_idx = if split.val.is_empty() { &split.train } else { &split.val };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = SplitMix64::stream(cfg.seed, 0x7261696e);
    let mut best: (ParamStore, usize, f64) = (model.store.clone(), 0, f64::INFINITY);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order = split.train.clone();
        rng.shuffle(&mut order);
        let (mut acc, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let step = (|| -> std::result::Result<f64, TensorError> {
                let b = ds.batch(chunk, &model.config, &model.scaler, &model.bounds);
                let mut g = Graph::new();
                let mut cx = Ctx::new(&mut g, &model.store, true);
                let y = model.forward(&mut cx, &b)?;
                let updates = std::mem::take(&mut cx.updates);
                let l = match loss_kind {
                    LossKind::Mse => g.mse(y, &b.target)?,
                    LossKind::Imbalance { alpha } => imbalance_weighted_mse(&mut g, y, &b.target, alpha)?,
                };
                let lv = g.value(l).item();
                let grads = g.backward(l)?.params(&model.store);
                opt.step(&mut model.store, &grads)?;
                apply_updates(&mut model.store, updates)?;
                Ok(lv)
            })();
            match step {
                Ok(lv) => {
                    acc += lv * chunk.len() as f64;
                    seen += chunk.len();
                }
                Err(e) => {
                    model.store = best.0;
                    return Err(diverged(epoch, e));
                }
            }
        }
        let val = match validation_mse(model, ds, val_idx, cfg.batch) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                model.store = best.0;
                return Err(diverged(epoch, format!("validation loss {v}")));
            }
            Err(e) => {
                model.store = best.0;
                return Err(diverged(epoch, e));
            }
        };
        logs.push(EpochLog {
            epoch,
            train_loss: acc / seen as f64,
            val_loss: val,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if val < best.2 {
            best = (model.store.clone(), epoch, val);
        } else if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    model.store = best.0;
    Ok(TrainReport { logs, best_epoch: best.1, best_val: best.2 })
}

pub fn write_train_log<W: Write>(logs: &[EpochLog], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

fn cube_from(ds: &Dataset, idx: &[usize], fields: Vec<Vec<f64>>) -> Result<DataCube> {
    let time = idx.iter().map(|&i| ds.dates[i]).collect();
    Ok(DataCube::new(ds.meta.clone(), time, ds.fine_lat.clone(), ds.fine_lon.clone(), fields.concat())?)
}

/// Fine-grid predictions for the samples `idx` (sorted by date).
pub fn predict_cube(model: &Model, ds: &Dataset, idx: &[usize], batch: usize) -> Result<DataCube> {
    ds.check_compatible(&model.config)?;
    let mut fields = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        fields.extend(model.predict(&ds.batch(chunk, &model.config, &model.scaler, &model.bounds))?);
    }
    cube_from(ds, idx, fields)
}

/// Skill reports on `idx` for each named model and for the bilinear baseline,
/// over every zone and season present in `mask` (uniform temperate if none).
pub fn evaluate(
    models: &[(&str, &Model)],
    ds: &Dataset,
    idx: &[usize],
    mask: Option<&ZoneMask>,
    bins: usize,
) -> Result<Vec<ReportRow>> {
    let default_mask;
    let mask = match mask {
        Some(m) => m,
        None => {
            default_mask = ZoneMask::uniform(ds.fine_lat.clone(), ds.fine_lon.clone(), crate::geogrid::Zone::Temperate);
            &default_mask
        }
    };
    let obs = cube_from(ds, idx, idx.iter().map(|&i| ds.targets[i].clone()).collect())?;
    let mut preds = vec![("bilinear".to_string(), cube_from(ds, idx, idx.iter().map(|&i| ds.baselines[i].clone()).collect())?)];
    for (name, m) in models {
        preds.push((name.to_string(), predict_cube(m, ds, idx, 16)?));
    }
    let mut rows = Vec::new();
    for (name, cube) in &preds {
        for zone in ZoneScope::ALL {
            for season in Season::ALL {
                match full_report(cube, &obs, mask, zone, season, bins) {
                    Ok(report) => rows.push(ReportRow { model: name.clone(), zone, season, report }),
                    Err(MetricError::EmptyPool(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    Ok(rows)
}
