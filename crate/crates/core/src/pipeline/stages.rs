use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{create_dir, write_json, AtStage, Classify, DataSource, DownscaleSection, PipelineError, RankingSection, Result};
use crate::downscale::{
    benchmark_pair, build_dataset, evaluate, train, write_train_log, ArchConfig, Dataset, Model, Split, TrainConfig,
    TrainReport,
};
use crate::geogrid::{
    read_cube, read_mask, regrid_bilinear, regrid_mask_nearest, write_mask, DataCube, Season, ZoneMask, ZoneScope,
};
use crate::metrics::{full_report, write_reports_csv, MetricError, ReportRow};
use crate::par::par_map;
use crate::ranking::{
    rank_all, synthetic_contexts, top_k, train_weightnet, write_heatmap_csv, write_ranking_csv, Context, RankedTable,
    WeightNet, WeightSource,
};

fn csv_file(stage: &'static str, path: &Path) -> Result<BufWriter<File>> {
    if let Some(p) = path.parent() {
        create_dir(stage, p)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| PipelineError::io(stage, path, e))?))
}

fn csv_err<'a>(stage: &'static str, path: &'a Path) -> impl Fn(csv::Error) -> PipelineError + 'a {
    move |e| PipelineError::io(stage, path, e)
}

fn load_mask_on(stage: &'static str, path: &Path, cube: &DataCube) -> Result<ZoneMask> {
    let mask = read_mask(path).at(stage)?;
    if &mask.lat == cube.lat() && &mask.lon == cube.lon() {
        Ok(mask)
    } else {
        regrid_mask_nearest(&mask, cube.lat(), cube.lon()).at(stage)
    }
}

/// Regrid every model onto the observation grid and compute the skill report
/// for each (model, zone, season). Writes `rank/reports.csv`.
pub fn run_metrics(
    r: &RankingSection,
    full_scale: bool,
    jobs: usize,
    run_dir: &Path,
) -> Result<(Vec<ReportRow>, ZoneMask, Vec<PathBuf>)> {
    let obs = read_cube(&r.obs).at("regrid")?;
    let mask = load_mask_on("regrid", &r.mask, &obs)?;
    let eval_model = |m: &super::ModelInput| -> Result<Vec<ReportRow>> {
        let cube = read_cube(&m.path).at("regrid")?;
        let cube = if cube.same_grid(obs.lat(), obs.lon()) {
            cube
        } else {
            regrid_bilinear(&cube, obs.lat(), obs.lon()).at("regrid")?
        };
        if cube.time() != obs.time() {
            return Err(PipelineError::validation("metrics", format!("model '{}' time axis differs from the observations", m.label)));
        }
        let mut rows = Vec::new();
        for &zone in &r.zones {
            for &season in &r.seasons {
                match full_report(&cube, &obs, &mask, zone, season, r.bins) {
                    Ok(report) => rows.push(ReportRow { model: m.label.clone(), zone, season, report }),
                    Err(MetricError::EmptyPool(_)) => {}
                    Err(e) => return Err(e.classify("metrics").with_context(&m.label)),
                }
            }
        }
        Ok(rows)
    };
    let per_model: Vec<Result<Vec<ReportRow>>> =
        if full_scale { r.models.iter().map(eval_model).collect() } else { par_map(&r.models, jobs, eval_model) };
    let mut rows = Vec::new();
    for p in per_model {
        rows.extend(p?);
    }
    if rows.is_empty() {
        return Err(PipelineError::validation("metrics", "no (zone, season) context has any paired values"));
    }
    let path = run_dir.join("rank").join("reports.csv");
    write_reports_csv(&rows, csv_file("metrics", &path)?).map_err(csv_err("metrics", &path))?;
    Ok((rows, mask, vec![path]))
}

impl PipelineError {
    fn with_context(self, what: &str) -> Self {
        match self {
            PipelineError::Validation { stage, msg } => PipelineError::Validation { stage, msg: format!("{what}: {msg}") },
            PipelineError::Numeric { stage, msg } => PipelineError::Numeric { stage, msg: format!("{what}: {msg}") },
            e => e,
        }
    }
}

pub struct RankOutcome {
    pub rows: Vec<ReportRow>,
    pub table: RankedTable,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct WeightNetLogRow {
    epoch: usize,
    phase: String,
    loss: f64,
}

/// Ranking over the metric rows: weights, TOPSIS, and the exported tables.
pub fn run_rank(r: &RankingSection, rows: Vec<ReportRow>, mask: &ZoneMask, seed: u64, jobs: usize, run_dir: &Path) -> Result<RankOutcome> {
    const STAGE: &str = "rank";
    let dir = run_dir.join("rank");
    let criteria = r.criteria()?;
    let mut files = Vec::new();
    let net: Option<WeightNet> = match (r.weights.source.as_str(), &r.weights.checkpoint) {
        ("weightnet", Some(ckpt)) => Some(WeightNet::load(ckpt, r.weights.train.hidden).at(STAGE)?),
        ("weightnet", None) => {
            let contexts = synthetic_contexts(r.weights.contexts, criteria.len(), seed);
            let cfg = crate::ranking::WeightNetConfig { seed, ..r.weights.train.clone() };
            let (net, log) = train_weightnet(&contexts, &cfg).at(STAGE)?;
            let ckpt = dir.join("weightnet");
            net.save(&ckpt).at(STAGE)?;
            files.extend(super::files_under(&ckpt));
            let path = dir.join("weightnet_log.csv");
            let mut w = csv::Writer::from_writer(csv_file(STAGE, &path)?);
            for rec in &log {
                let phase = serde_json::to_value(rec.phase).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                w.serialize(WeightNetLogRow { epoch: rec.epoch, phase, loss: rec.loss }).map_err(csv_err(STAGE, &path))?;
            }
            w.flush().map_err(|e| PipelineError::io(STAGE, &path, e))?;
            files.push(path);
            Some(net)
        }
        _ => None,
    };
    let source = match (r.weights.source.as_str(), &net) {
        ("uniform", _) => WeightSource::Uniform,
        ("entropy", _) => WeightSource::Entropy,
        (_, Some(n)) => WeightSource::Net(n),
        (s, None) => return Err(PipelineError::validation(STAGE, format!("unknown weight source '{s}'"))),
    };
    let table = rank_all(&rows, &criteria, source, jobs).at(STAGE)?;
    let dropped: std::collections::BTreeSet<String> =
        table.weights().iter().flat_map(|w| w.dropped.iter().map(|m| m.to_string())).collect();
    for m in dropped {
        log::warn!("criterion {m} has no valid value in some contexts and was dropped there");
    }

    let path = dir.join("ranking.csv");
    write_ranking_csv(&table, csv_file(STAGE, &path)?).map_err(csv_err(STAGE, &path))?;
    files.push(path);
    let path = dir.join("heatmap.csv");
    write_heatmap_csv(&table.heatmap(), csv_file(STAGE, &path)?).map_err(csv_err(STAGE, &path))?;
    files.push(path);
    let path = dir.join("weights.json");
    write_json(STAGE, &path, &table.weights())?;
    files.push(path);

    let path = dir.join(format!("top{}.csv", r.top_k));
    let mut w = csv::Writer::from_writer(csv_file(STAGE, &path)?);
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    w.write_record(["zone", "season", "rank", "model", "score", "bias", "rmse", "kge", "nse", "pdf_overlap"])
        .map_err(csv_err(STAGE, &path))?;
    for t in top_k(&table, r.top_k) {
        w.write_record([
            t.context.zone.to_string(),
            t.context.season.to_string(),
            t.rank.to_string(),
            t.model.clone(),
            format!("{:.17e}", t.score),
            format!("{:.17e}", t.bias),
            format!("{:.17e}", t.rmse),
            opt(t.kge),
            opt(t.nse),
            format!("{:.17e}", t.pdf_overlap),
        ])
        .map_err(csv_err(STAGE, &path))?;
    }
    w.flush().map_err(|e| PipelineError::io(STAGE, &path, e))?;
    files.push(path);

    let path = dir.join("models.json");
    write_json(STAGE, &path, &r.models.iter().map(|m| m.label.as_str()).collect::<Vec<_>>())?;
    files.push(path);
    let mask_dir = dir.join("mask");
    write_mask(mask, &mask_dir).at(STAGE)?;
    files.extend(super::files_under(&mask_dir));
    Ok(RankOutcome { rows, table, files })
}

/// Label of the model ranked first in the Overall/ANNUAL context.
pub fn winner_label(table: &RankedTable) -> Option<String> {
    table
        .get(Context { zone: ZoneScope::Overall, season: Season::Annual })
        .map(|c| c.result.winner().model.clone())
}

fn load_data(d: &DownscaleSection, ranking: Option<(&RankingSection, &RankedTable)>, t: usize, seed: u64) -> Result<Dataset> {
    const STAGE: &str = "downscale";
    let (coarse, fine) = match &d.data {
        DataSource::Synthetic { samples, bias, noise_sd, seed: s } => {
            benchmark_pair(*samples, t, *bias, *noise_sd, *s ^ seed).at(STAGE)?
        }
        DataSource::Gcf { coarse, fine } => (read_cube(coarse).at(STAGE)?, read_cube(fine).at(STAGE)?),
        DataSource::TopRanked => {
            let (r, table) = ranking.ok_or_else(|| PipelineError::validation(STAGE, "top_ranked data needs a ranking"))?;
            let label = winner_label(table)
                .ok_or_else(|| PipelineError::validation(STAGE, "no Overall/ANNUAL context in the ranking"))?;
            let model = r.models.iter().find(|m| m.label == label).expect("winner is a configured model");
            log::info!("downscaling top-ranked model '{label}'");
            (read_cube(&model.path).at(STAGE)?, read_cube(&r.obs).at(STAGE)?)
        }
    };
    build_dataset(&[&coarse], &fine, t).at(STAGE)
}

/// Architecture config adapted to the data's grid.
fn fit_arch(arch: &ArchConfig, ds: &Dataset, seed: u64) -> ArchConfig {
    ArchConfig { coarse: ds.coarse, factor: ds.factor, channels: ds.channels, seed, ..arch.clone() }
}

/// Train one architecture and write its checkpoint, log and split under `out`.
pub fn train_one(arch: &ArchConfig, tc: &TrainConfig, ds: &Dataset, split: &Split, seed: u64, out: &Path) -> Result<(Model, TrainReport, Vec<PathBuf>, PathBuf)> {
    const STAGE: &str = "downscale";
    let cfg = fit_arch(arch, ds, seed);
    let mut model = Model::new(cfg.clone(), ds.fit_scaler(&split.train), ds.coord_bounds(cfg.patch)).at(STAGE)?;
    let tc = TrainConfig { seed, ..tc.clone() };
    let report = train(&mut model, ds, split, &tc).at(STAGE)?;
    let ckpt = out.join("checkpoint");
    model.save(&ckpt, report.best_epoch as u64).at(STAGE)?;
    let mut files = super::files_under(&ckpt);
    let path = out.join("split.json");
    write_json(STAGE, &path, split)?;
    files.push(path);
    let path = out.join("summary.json");
    write_json(STAGE, &path, &serde_json::json!({"best_epoch": report.best_epoch, "best_val": report.best_val, "epochs": report.logs.len()}))?;
    files.push(path);
    let log = out.join("train_log.csv");
    write_train_log(&report.logs, csv_file(STAGE, &log)?).map_err(csv_err(STAGE, &log))?;
    Ok((model, report, files, log))
}

pub struct DownscaleOutcome {
    pub rows: Vec<ReportRow>,
    pub reports: Vec<(String, TrainReport)>,
    pub files: Vec<PathBuf>,
    pub unchecked: Vec<PathBuf>,
}

/// Train every configured architecture (in parallel), evaluate them and the
/// bilinear baseline on the test split, and write `downscale/report.csv`.
pub fn run_downscale(
    d: &DownscaleSection,
    ranking: Option<(&RankingSection, &RankedTable)>,
    seed: u64,
    jobs: usize,
    run_dir: &Path,
) -> Result<DownscaleOutcome> {
    const STAGE: &str = "downscale";
    let ds = load_data(d, ranking, d.archs[0].t, seed)?;
    let split = Split::random(ds.len(), d.val_frac, d.test_frac, seed);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(PipelineError::validation(STAGE, format!("{} samples leave an empty train or test split", ds.len())));
    }
    let dir = run_dir.join("downscale");
    let trained = par_map(&d.archs, jobs, |a| train_one(a, &d.train, &ds, &split, seed, &dir.join(a.kind.name())));
    let mut models = Vec::new();
    let mut out = DownscaleOutcome { rows: Vec::new(), reports: Vec::new(), files: Vec::new(), unchecked: Vec::new() };
    for (a, t) in d.archs.iter().zip(trained) {
        let (model, report, files, log) = t?;
        models.push((a.kind.name(), model));
        out.reports.push((a.kind.name().to_string(), report));
        out.files.extend(files);
        out.unchecked.push(log);
    }
    let mask = match &d.mask {
        Some(p) => Some(load_mask_on(STAGE, p, &DataCube::new(ds.meta.clone(), vec![ds.dates[0]], ds.fine_lat.clone(), ds.fine_lon.clone(), ds.targets[0].clone()).at(STAGE)?)?),
        None => None,
    };
    let named: Vec<(&str, &Model)> = models.iter().map(|(n, m)| (*n, m)).collect();
    out.rows = evaluate(&named, &ds, &split.test, mask.as_ref(), d.bins).at(STAGE)?;
    let path = dir.join("report.csv");
    write_reports_csv(&out.rows, csv_file(STAGE, &path)?).map_err(csv_err(STAGE, &path))?;
    out.files.push(path);
    Ok(out)
}

/// `<dir>/coarse` and `<dir>/fine` GCF cubes as a dataset with `t` frames.
pub fn load_data_dir(dir: &Path, t: usize) -> Result<Dataset> {
    let coarse = read_cube(&dir.join("coarse")).at("downscale")?;
    let fine = read_cube(&dir.join("fine")).at("downscale")?;
    build_dataset(&[&coarse], &fine, t).at("downscale")
}

/// Evaluate a saved checkpoint on a data directory, using the checkpoint's
/// test split when one was saved next to it.
pub fn eval_checkpoint(ckpt: &Path, data: &Path, mask: Option<&Path>, bins: usize, report: &Path) -> Result<Vec<ReportRow>> {
    const STAGE: &str = "downscale";
    let model = Model::load(ckpt).at(STAGE)?;
    let ds = load_data_dir(data, model.config.t)?;
    let split_path = ckpt.parent().map(|p| p.join("split.json")).filter(|p| p.is_file());
    let idx: Vec<usize> = match split_path {
        Some(p) => {
            let bytes = std::fs::read(&p).map_err(|e| PipelineError::io(STAGE, &p, e))?;
            let s: Split = serde_json::from_slice(&bytes).map_err(|e| PipelineError::validation(STAGE, e.to_string()))?;
            s.test
        }
        None => (0..ds.len()).collect(),
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
        return Err(PipelineError::validation(STAGE, format!("split index {bad} out of range for {} samples", ds.len())));
    }
    let mask = match mask {
        Some(p) => Some(load_mask_on(STAGE, p, &read_cube(&data.join("fine")).at(STAGE)?)?),
        None => None,
    };
    let rows = evaluate(&[(model.config.kind.name(), &model)], &ds, &idx, mask.as_ref(), bins).at(STAGE)?;
    write_reports_csv(&rows, csv_file(STAGE, report)?).map_err(csv_err(STAGE, report))?;
    Ok(rows)
}
