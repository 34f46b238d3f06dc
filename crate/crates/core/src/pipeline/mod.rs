//! Config-driven orchestration of the ranking and downscaling stages, the
//! bundled synthetic fixture, run manifests and plot-ready report bundles.

mod config;
mod fixture;
mod report;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::downscale::DownscaleError;
use crate::geogrid::GridError;
use crate::metrics::MetricError;
use crate::ranking::RankError;
use crate::tensor::TensorError;

pub use config::{
    DataSource, DownscaleSection, ModelInput, PipelineConfig, RankingSection, WeightsSection, SCHEMA_VERSION,
};
pub use fixture::{write_fixture, FixtureSpec};
pub use report::run_report;
pub use stages::{eval_checkpoint, load_data_dir, run_downscale, run_metrics, run_rank, train_one, winner_label, DownscaleOutcome, RankOutcome};

/// Exit status classes shared with the command line.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {msg}")]
    Validation { stage: &'static str, msg: String },
    #[error("{stage}: numeric fault: {msg}")]
    Numeric { stage: &'static str, msg: String },
    #[error("{stage}: {path}: {msg}")]
    Io { stage: &'static str, path: String, msg: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation { .. } => 2,
            PipelineError::Numeric { .. } => 3,
            PipelineError::Io { .. } => 4,
        }
    }

    pub fn validation(stage: &'static str, msg: impl Into<String>) -> Self {
        PipelineError::Validation { stage, msg: msg.into() }
    }

    pub fn io(stage: &'static str, path: &Path, e: impl ToString) -> Self {
        PipelineError::Io { stage, path: path.display().to_string(), msg: e.to_string() }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Attach a stage name and an exit class to a module error.
pub trait Classify {
    fn classify(self, stage: &'static str) -> PipelineError;
}

impl Classify for GridError {
    fn classify(self, stage: &'static str) -> PipelineError {
        match self {
            GridError::Io { path, source } => PipelineError::Io { stage, path, msg: source.to_string() },
            GridError::NonFinite(_) => PipelineError::Numeric { stage, msg: self.to_string() },
            e => PipelineError::validation(stage, e.to_string()),
        }
    }
}

impl Classify for MetricError {
    fn classify(self, stage: &'static str) -> PipelineError {
        match self {
            MetricError::NonFinite(_) => PipelineError::Numeric { stage, msg: self.to_string() },
            e => PipelineError::validation(stage, e.to_string()),
        }
    }
}

impl Classify for TensorError {
    fn classify(self, stage: &'static str) -> PipelineError {
        match self {
            TensorError::Io { path, source } => PipelineError::Io { stage, path, msg: source.to_string() },
            TensorError::NonFinite { .. } => PipelineError::Numeric { stage, msg: self.to_string() },
            e => PipelineError::validation(stage, e.to_string()),
        }
    }
}

impl Classify for RankError {
    fn classify(self, stage: &'static str) -> PipelineError {
        match self {
            RankError::Tensor(e) => e.classify(stage),
            RankError::Diverged { .. } => PipelineError::Numeric { stage, msg: self.to_string() },
            e => PipelineError::validation(stage, e.to_string()),
        }
    }
}

impl Classify for DownscaleError {
    fn classify(self, stage: &'static str) -> PipelineError {
        match self {
            DownscaleError::Tensor(e) => e.classify(stage),
            DownscaleError::Grid(e) => e.classify(stage),
            DownscaleError::Metric(e) => e.classify(stage),
            DownscaleError::Diverged { .. } => PipelineError::Numeric { stage, msg: self.to_string() },
            e => PipelineError::validation(stage, e.to_string()),
        }
    }
}

pub trait AtStage<T> {
    fn at(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Classify> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.classify(stage))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io("manifest", path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn create_dir(stage: &'static str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(stage, dir, e))
}

pub(crate) fn write_file(stage: &'static str, path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(stage, parent)?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(stage, path, e))
}

pub(crate) fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::validation(stage, e.to_string()))?;
    text.push('\n');
    write_file(stage, path, text.as_bytes())
}

/// Checksums of one stage's outputs, keyed by path relative to the run dir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub outputs: BTreeMap<String, String>,
    /// Files written by the stage but excluded from checksums (wall-clock content).
    #[serde(default)]
    pub unchecked: Vec<String>,
}

/// `manifest.json`: reproducible by construction, so no timings live here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub schema: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

impl RunManifest {
    pub fn new(config_sha256: String, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema: SCHEMA_VERSION,
            config_sha256,
            seed,
            stages: BTreeMap::new(),
        }
    }

    /// Existing manifest in `run_dir` if it was produced by the same config and
    /// seed, otherwise a fresh one.
    pub fn open(run_dir: &Path, config_sha256: &str, seed: u64) -> Self {
        fs::read(run_dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice::<RunManifest>(&b).ok())
            .filter(|m| m.config_sha256 == config_sha256 && m.seed == seed)
            .unwrap_or_else(|| Self::new(config_sha256.to_string(), seed))
    }

    pub fn record(&mut self, run_dir: &Path, stage: &str, files: &[PathBuf], unchecked: &[PathBuf]) -> Result<()> {
        let rel = |p: &Path| p.strip_prefix(run_dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
        let mut outputs = BTreeMap::new();
        for f in files {
            outputs.insert(rel(f), sha256_file(f)?);
        }
        let mut unchecked: Vec<String> = unchecked.iter().map(|p| rel(p)).collect();
        unchecked.sort();
        self.stages.insert(stage.to_string(), StageRecord { outputs, unchecked });
        Ok(())
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join(MANIFEST_FILE);
        write_json("manifest", &path, self)?;
        Ok(path)
    }
}

/// Merge per-stage wall times (milliseconds) into `timings.json`.
pub fn write_timings(run_dir: &Path, timings: &BTreeMap<String, f64>) -> Result<()> {
    let path = run_dir.join(TIMINGS_FILE);
    let mut all: BTreeMap<String, f64> =
        fs::read(&path).ok().and_then(|b| serde_json::from_slice(&b).ok()).unwrap_or_default();
    all.extend(timings.iter().map(|(k, v)| (k.clone(), *v)));
    write_json("manifest", &path, &all)
}

/// Every regular file under `dir`, sorted.
pub(crate) fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if let Ok(rd) = fs::read_dir(&d) {
            for e in rd.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
    }
    out.sort();
    out
}

/// Output of a configured run: the updated manifest plus what each stage produced.
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub rank: Option<RankOutcome>,
    pub downscale: Option<DownscaleOutcome>,
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = std::time::Instant::now();
    let out = f();
    timings.insert(name.to_string(), start.elapsed().as_secs_f64() * 1e3);
    out
}

/// Which sections of a config to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stages {
    MetricsOnly,
    Rank,
    Downscale,
    All,
}

/// Validate `cfg`, run the requested stages into its run directory, and write
/// `manifest.json` and `timings.json`.
pub fn run(cfg: &PipelineConfig, stages: Stages, root: Option<&Path>, jobs: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let run_dir = cfg.run_dir(root);
    create_dir("config", &run_dir)?;
    let seed = cfg.seed;
    let mut manifest = RunManifest::open(&run_dir, &cfg.digest(), seed);
    let mut timings = BTreeMap::new();
    let mut rank = None;
    let wants_rank = matches!(stages, Stages::MetricsOnly | Stages::Rank | Stages::All)
        || (stages == Stages::Downscale && cfg.downscale.as_ref().is_some_and(|d| d.data == DataSource::TopRanked));
    if let (true, Some(r)) = (wants_rank, &cfg.ranking) {
        let (rows, mask, files) = timed(&mut timings, "metrics", || run_metrics(r, cfg.full_scale, jobs, &run_dir))?;
        manifest.record(&run_dir, "metrics", &files, &[])?;
        if stages != Stages::MetricsOnly {
            let out = timed(&mut timings, "rank", || run_rank(r, rows, &mask, seed, jobs, &run_dir))?;
            manifest.record(&run_dir, "rank", &out.files, &[])?;
            rank = Some(out);
        }
    } else if stages != Stages::Downscale && stages != Stages::All {
        return Err(PipelineError::validation("config", "config has no ranking section"));
    }
    let mut downscale = None;
    if matches!(stages, Stages::Downscale | Stages::All) {
        match &cfg.downscale {
            Some(d) => {
                let ranking = cfg.ranking.as_ref().zip(rank.as_ref().map(|o: &RankOutcome| &o.table));
                let out = timed(&mut timings, "downscale", || run_downscale(d, ranking, seed, jobs, &run_dir))?;
                manifest.record(&run_dir, "downscale", &out.files, &out.unchecked)?;
                downscale = Some(out);
            }
            None if stages == Stages::Downscale => {
                return Err(PipelineError::validation("config", "config has no downscale section"))
            }
            None => {}
        }
    }
    manifest.write(&run_dir)?;
    write_timings(&run_dir, &timings)?;
    Ok(RunOutput { run_dir, manifest, rank, downscale })
}

/// Report stage over an existing run directory; updates its manifest.
pub fn report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let start = std::time::Instant::now();
    let files = run_report(run_dir)?;
    let path = run_dir.join(MANIFEST_FILE);
    if let Some(mut m) = fs::read(&path).ok().and_then(|b| serde_json::from_slice::<RunManifest>(&b).ok()) {
        m.record(run_dir, "report", &files, &[])?;
        m.write(run_dir)?;
    }
    write_timings(run_dir, &BTreeMap::from([("report".to_string(), start.elapsed().as_secs_f64() * 1e3)]))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_classes() {
        let io = GridError::Io { path: "x".into(), source: std::io::Error::other("gone") };
        assert_eq!(io.classify("ingest").exit_code(), 4);
        assert_eq!(GridError::NonFinite(3).classify("ingest").exit_code(), 3);
        assert_eq!(GridError::Invalid("bad".into()).classify("ingest").exit_code(), 2);
        let nan = RankError::Tensor(TensorError::NonFinite { op: "relu" });
        assert_eq!(nan.classify("rank").exit_code(), 3);
        let div = DownscaleError::Diverged { epoch: 2, detail: "nan".into() };
        let e = div.classify("downscale");
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().starts_with("downscale: "));
    }

    #[test]
    fn digest_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
