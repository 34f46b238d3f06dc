use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sha256_hex, PipelineError, Result};
use crate::downscale::{ArchConfig, ArchKind, TrainConfig};
use crate::geogrid::{read_header, Season, ZoneScope, DEFAULT_FILL};
use crate::metrics::{Metric, DEFAULT_PDF_BINS};
use crate::ranking::{default_criteria, Criterion, WeightNetConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    /// Run directory; relative paths resolve against the output root.
    pub output: PathBuf,
    #[serde(default)]
    pub ranking: Option<RankingSection>,
    #[serde(default)]
    pub downscale: Option<DownscaleSection>,
    /// Evaluate one model cube at a time instead of holding all in memory.
    #[serde(default)]
    pub full_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingSection {
    pub obs: PathBuf,
    pub models: Vec<ModelInput>,
    pub mask: PathBuf,
    #[serde(default = "default_criteria_names")]
    pub criteria: Vec<String>,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default = "all_zones")]
    pub zones: Vec<ZoneScope>,
    #[serde(default = "all_seasons")]
    pub seasons: Vec<Season>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    /// `weightnet`, `entropy` or `uniform`.
    pub source: String,
    /// Pretrained weight network; trained on the fly when absent.
    pub checkpoint: Option<PathBuf>,
    pub train: WeightNetConfig,
    /// Synthetic decision matrices used to train the network.
    pub contexts: usize,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            source: "weightnet".into(),
            checkpoint: None,
            train: WeightNetConfig { epochs: 200, ..WeightNetConfig::default() },
            contexts: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The bundled benchmark generator.
    Synthetic { samples: usize, bias: f64, noise_sd: f64, seed: u64 },
    /// A coarse input cube and the fine target cube (GCF directories).
    Gcf { coarse: PathBuf, fine: PathBuf },
    /// The raw cube of the model ranked first in Overall/ANNUAL, against the ranking's observations.
    TopRanked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownscaleSection {
    pub data: DataSource,
    #[serde(default = "default_archs")]
    pub archs: Vec<ArchConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_frac")]
    pub val_frac: f64,
    #[serde(default = "default_frac")]
    pub test_frac: f64,
    /// Zone mask for evaluation; uniform temperate when absent.
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_criteria_names() -> Vec<String> {
    default_criteria().iter().map(|c| c.metric.name().to_string()).collect()
}
fn all_zones() -> Vec<ZoneScope> {
    ZoneScope::ALL.to_vec()
}
fn all_seasons() -> Vec<Season> {
    Season::ALL.to_vec()
}
fn default_bins() -> usize {
    DEFAULT_PDF_BINS
}
fn default_top_k() -> usize {
    5
}
fn default_frac() -> f64 {
    0.15
}
fn default_archs() -> Vec<ArchConfig> {
    ArchKind::ALL.iter().map(|&k| ArchConfig::desk(k)).collect()
}

const STAGE: &str = "config";

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::validation(STAGE, msg)
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| bad(format!("invalid config: {e}")))
    }

    /// Parse and resolve relative input paths against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(STAGE, path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_inputs(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_inputs(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(r) = &mut self.ranking {
            fix(&mut r.obs);
            fix(&mut r.mask);
            r.models.iter_mut().for_each(|m| fix(&mut m.path));
            if let Some(c) = &mut r.weights.checkpoint {
                fix(c);
            }
        }
        if let Some(d) = &mut self.downscale {
            if let DataSource::Gcf { coarse, fine } = &mut d.data {
                fix(coarse);
                fix(fine);
            }
            if let Some(m) = &mut d.mask {
                fix(m);
            }
        }
    }

    /// Run directory under `root` (or the working directory).
    pub fn run_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output.is_relative() => r.join(&self.output),
            _ => self.output.clone(),
        }
    }

    /// Hash of the canonical JSON form without the output directory, so
    /// neither formatting nor where the run lands changes it.
    pub fn digest(&self) -> String {
        let canonical = Self { output: PathBuf::new(), ..self.clone() };
        sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }

    /// Pre-flight checks: everything that can be rejected before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(bad(format!("schema {} is not supported (expected {SCHEMA_VERSION})", self.schema)));
        }
        if self.output.as_os_str().is_empty() {
            return Err(bad("output directory is empty"));
        }
        if self.ranking.is_none() && self.downscale.is_none() {
            return Err(bad("config has neither a ranking nor a downscale section"));
        }
        if let Some(r) = &self.ranking {
            r.validate()?;
        }
        if let Some(d) = &self.downscale {
            if d.data == DataSource::TopRanked && self.ranking.is_none() {
                return Err(bad("downscale.data = top_ranked needs a ranking section"));
            }
            d.validate()?;
        }
        Ok(())
    }
}

fn check_gcf(what: &str, dir: &Path) -> Result<()> {
    if !dir.join("header.json").is_file() {
        return Err(bad(format!("{what} {} is not a GCF directory (missing header.json)", dir.display())));
    }
    read_header(dir).map_err(|e| bad(format!("{what} {}: {e}", dir.display())))?;
    Ok(())
}

impl RankingSection {
    pub fn criteria(&self) -> Result<Vec<Criterion>> {
        let mut seen = BTreeSet::new();
        self.criteria
            .iter()
            .map(|s| {
                let m: Metric = s.parse().map_err(|e| bad(format!("criterion '{s}': {e}")))?;
                if !seen.insert(m) {
                    return Err(bad(format!("criterion '{s}' listed twice")));
                }
                Ok(Criterion::of(m))
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.models.len() < 2 {
            return Err(bad(format!("ranking needs at least 2 models, got {}", self.models.len())));
        }
        let mut labels = BTreeSet::new();
        for m in &self.models {
            if m.label.trim().is_empty() {
                return Err(bad("model label is empty"));
            }
            if !labels.insert(m.label.as_str()) {
                return Err(bad(format!("model label '{}' is not unique", m.label)));
            }
        }
        if self.criteria()?.is_empty() {
            return Err(bad("criteria list is empty"));
        }
        if !["weightnet", "entropy", "uniform"].contains(&self.weights.source.as_str()) {
            return Err(bad(format!("weights.source '{}' (weightnet, entropy, uniform)", self.weights.source)));
        }
        if self.weights.source == "weightnet" && self.weights.checkpoint.is_none() && self.weights.contexts == 0 {
            return Err(bad("weights.contexts must be positive to train a weight network"));
        }
        if self.zones.is_empty() || self.seasons.is_empty() {
            return Err(bad("zones and seasons must be non-empty"));
        }
        if self.bins < 2 || self.top_k == 0 {
            return Err(bad("bins must be >= 2 and top_k >= 1"));
        }
        check_gcf("observation cube", &self.obs)?;
        check_gcf("zone mask", &self.mask)?;
        for m in &self.models {
            check_gcf(&format!("model '{}'", m.label), &m.path)?;
        }
        if let Some(c) = &self.weights.checkpoint {
            if !c.join("manifest.json").is_file() {
                return Err(bad(format!("weight network checkpoint {} not found", c.display())));
            }
        }
        Ok(())
    }
}

impl DownscaleSection {
    fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(bad("downscale.archs is empty"));
        }
        let mut kinds = BTreeSet::new();
        for a in &self.archs {
            a.validate().map_err(|e| bad(format!("{}: {e}", a.kind)))?;
            if !kinds.insert(a.kind) {
                return Err(bad(format!("architecture {} listed twice", a.kind)));
            }
            if a.t != self.archs[0].t || a.channels != 1 {
                return Err(bad("all architectures must share t and use one input channel"));
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch == 0 || !(t.lr > 0.0) || t.patience == Some(0) {
            return Err(bad("train: epochs, batch, lr and patience must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_frac) || !(0.0..1.0).contains(&self.test_frac) || self.val_frac + self.test_frac >= 1.0 {
            return Err(bad("val_frac and test_frac must lie in [0, 1) and leave a training split"));
        }
        if self.test_frac == 0.0 {
            return Err(bad("test_frac must be positive for evaluation"));
        }
        match &self.data {
            DataSource::Synthetic { samples, noise_sd, .. } => {
                if *samples < 4 || !(*noise_sd >= 0.0) {
                    return Err(bad("synthetic data needs samples >= 4 and noise_sd >= 0"));
                }
            }
            DataSource::Gcf { coarse, fine } => {
                check_gcf("coarse cube", coarse)?;
                check_gcf("fine cube", fine)?;
            }
            DataSource::TopRanked => {}
        }
        if let Some(m) = &self.mask {
            check_gcf("zone mask", m)?;
        }
        if self.bins < 2 {
            return Err(bad("bins must be >= 2"));
        }
        Ok(())
    }
}

/// Fill value used for rasters written by the pipeline.
pub(crate) const RASTER_FILL: f64 = DEFAULT_FILL;
