use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::RASTER_FILL;
use super::{write_file, AtStage, PipelineError, Result};
use crate::geogrid::{read_mask, write_cube, Calendar, CubeMeta, DataCube, Date, Variable};

const STAGE: &str = "report";

struct RankRow {
    zone: String,
    season: String,
    model: String,
    cc: f64,
    rank: usize,
}

fn read_csv(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::io(STAGE, path, e))?;
    let header = r.headers().map_err(|e| PipelineError::io(STAGE, path, e))?.clone();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(|e| PipelineError::validation(STAGE, format!("{}: {e}", path.display())))?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| PipelineError::validation(STAGE, format!("{}: missing column '{name}'", path.display())))
}

fn read_ranking(path: &Path) -> Result<Vec<RankRow>> {
    let (header, rows) = read_csv(path)?;
    let [z, s, m, cc, rk] = ["zone", "season", "model", "cc", "rank"].map(|c| column(&header, c, path));
    let (z, s, m, cc, rk) = (z?, s?, m?, cc?, rk?);
    rows.iter()
        .map(|r| {
            let num = |i: usize| r.get(i).unwrap_or("").to_string();
            Ok(RankRow {
                zone: num(z),
                season: num(s),
                model: num(m),
                cc: num(cc).parse().map_err(|_| PipelineError::validation(STAGE, format!("bad cc '{}'", num(cc))))?,
                rank: num(rk).parse().map_err(|_| PipelineError::validation(STAGE, format!("bad rank '{}'", num(rk))))?,
            })
        })
        .collect()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Plot-ready bundles under `<run>/report/`, derived only from files the
/// rank and downscale stages wrote.
pub fn run_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let ranking = run_dir.join("rank").join("ranking.csv");
    let downscale = run_dir.join("downscale").join("report.csv");
    if !ranking.is_file() && !downscale.is_file() {
        return Err(PipelineError::validation(
            STAGE,
            format!("{} holds neither rank/ranking.csv nor downscale/report.csv", run_dir.display()),
        ));
    }
    let out = run_dir.join("report");
    let mut files = Vec::new();
    if ranking.is_file() {
        let rows = read_ranking(&ranking)?;
        let models_path = run_dir.join("rank").join("models.json");
        let models: Vec<String> = serde_json::from_slice(&fs::read(&models_path).map_err(|e| PipelineError::io(STAGE, &models_path, e))?)
            .map_err(|e| PipelineError::validation(STAGE, e.to_string()))?;
        let mut contexts: Vec<(String, String)> = Vec::new();
        for r in &rows {
            let key = (r.zone.clone(), r.season.clone());
            if !contexts.contains(&key) {
                contexts.push(key);
            }
        }
        let cc: BTreeMap<(&str, &str, &str), f64> =
            rows.iter().map(|r| ((r.model.as_str(), r.zone.as_str(), r.season.as_str()), r.cc)).collect();

        let mut header = vec!["model".to_string()];
        header.extend(contexts.iter().map(|(z, s)| format!("{z}/{s}")));
        let body = models.iter().map(|m| {
            let mut rec = vec![m.clone()];
            rec.extend(contexts.iter().map(|(z, s)| cc.get(&(m.as_str(), z.as_str(), s.as_str())).map(|v| format!("{v:.17e}")).unwrap_or_default()));
            rec
        });
        let path = out.join("heatmap.csv");
        write_file(STAGE, &path, &csv_bytes(&header.iter().map(String::as_str).collect::<Vec<_>>(), body))?;
        files.push(path);

        let body = contexts.iter().map(|(z, s)| {
            let here: Vec<&RankRow> = rows.iter().filter(|r| &r.zone == z && &r.season == s).collect();
            let mean = here.iter().map(|r| r.cc).sum::<f64>() / here.len() as f64;
            let best = here.iter().min_by_key(|r| r.rank).expect("context has rows");
            vec![z.clone(), s.clone(), format!("{mean:.17e}"), best.model.clone(), format!("{:.17e}", best.cc)]
        });
        let path = out.join("zone_season.csv");
        write_file(STAGE, &path, &csv_bytes(&["zone", "season", "mean_cc", "best_model", "best_cc"], body))?;
        files.push(path);

        let mask = read_mask(&run_dir.join("rank").join("mask")).at(STAGE)?;
        let winner: BTreeMap<&str, usize> = rows
            .iter()
            .filter(|r| r.rank == 1 && r.season == "ANNUAL")
            .filter_map(|r| models.iter().position(|m| *m == r.model).map(|i| (r.zone.as_str(), i)))
            .collect();
        let labels: BTreeMap<u8, &str> = crate::geogrid::Zone::ALL.iter().map(|z| (z.code(), z.label())).collect();
        let data = mask
            .codes()
            .iter()
            .map(|c| labels.get(c).and_then(|l| winner.get(l)).map(|&i| i as f64).unwrap_or(RASTER_FILL))
            .collect();
        let meta = CubeMeta {
            variable: Variable::Other("best_model_index".into()),
            units: "index".into(),
            calendar: Calendar::NoLeap,
            fill: RASTER_FILL,
        };
        let raster = DataCube::new(meta, vec![Date::new(2000, 1, 1)], mask.lat.clone(), mask.lon.clone(), data).at(STAGE)?;
        let dir = out.join("best_model");
        write_cube(&raster, &dir).at(STAGE)?;
        files.extend(super::files_under(&dir));
    }
    if downscale.is_file() {
        let (header, rows) = read_csv(&downscale)?;
        let cols = ["model", "zone", "season", "bias", "rmse", "r", "kge", "nse", "pdf_overlap", "n"];
        let idx = cols.iter().map(|c| column(&header, c, &downscale)).collect::<Result<Vec<_>>>()?;
        let body = rows.iter().map(|r| idx.iter().map(|&i| r.get(i).unwrap_or("").to_string()).collect());
        let path = out.join("downscale_comparison.csv");
        write_file(STAGE, &path, &csv_bytes(&cols, body))?;
        files.push(path);
    }
    Ok(files)
}
