use std::path::{Path, PathBuf};

use serde_json::json;

use super::{write_json, AtStage, Result};
use crate::downscale::benchmark_pair;
use crate::geogrid::{regrid_bilinear, synth_pair, write_cube, write_mask, GridAxis, SynthConfig, Zone, ZoneMask};

/// The bundled end-to-end fixture: a fine observation cube (the noise-free
/// block mean, bilinearly upsampled), three coarse model cubes on a 4x coarser grid, a five-zone mask with an ocean corner,
/// the downscaling benchmark pair, and a config tying them together.
#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    /// Fine grid edge; the model grids are `size / 4`.
    pub size: usize,
    pub days: usize,
    /// `(label, bias, noise_sd)` per model.
    pub models: Vec<(String, f64, f64)>,
    pub downscale_samples: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 11,
            size: 40,
            days: 365,
            models: vec![
                ("unbiased".into(), 0.0, 0.3),
                ("warm".into(), 2.0, 0.3),
                ("noisy".into(), -1.0, 1.0),
            ],
            downscale_samples: 200,
        }
    }
}

const STAGE: &str = "fixture";

/// Five horizontal zone bands; the top-right corner of the first band is ocean.
fn band_mask(lat: &GridAxis, lon: &GridAxis) -> Result<ZoneMask> {
    let (nlat, nlon) = (lat.len(), lon.len());
    let codes = (0..nlat * nlon)
        .map(|k| {
            let (i, j) = (k / nlon, k % nlon);
            if i < nlat / 5 && j >= nlon - nlon / 8 {
                0
            } else {
                Zone::ALL[(i * 5 / nlat).min(4)].code()
            }
        })
        .collect();
    ZoneMask::new(lat.clone(), lon.clone(), codes).at(STAGE)
}

/// Write the fixture under `dir` and return the path of its `config.json`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<PathBuf> {
    let synth = |bias, noise| synth_pair(&SynthConfig::new(spec.seed, 4, spec.days, spec.size, spec.size, bias, noise)).at(STAGE);
    let (truth, fine) = synth(0.0, 0.0)?;
    let obs = regrid_bilinear(&truth, fine.lat(), fine.lon()).at(STAGE)?;
    let mut models = Vec::new();
    for (label, bias, noise) in &spec.models {
        let (coarse, _) = synth(*bias, *noise)?;
        write_cube(&coarse, &dir.join("models").join(label)).at(STAGE)?;
        models.push(json!({"label": label, "path": format!("models/{label}")}));
    }
    write_cube(&obs, &dir.join("obs")).at(STAGE)?;
    write_mask(&band_mask(obs.lat(), obs.lon())?, &dir.join("mask")).at(STAGE)?;

    let t = crate::downscale::ArchConfig::default().t;
    let (coarse, fine) = benchmark_pair(spec.downscale_samples, t, 0.0, 0.1, spec.seed).at(STAGE)?;
    write_cube(&coarse, &dir.join("downscale_data").join("coarse")).at(STAGE)?;
    write_cube(&fine, &dir.join("downscale_data").join("fine")).at(STAGE)?;

    let config = json!({
        "schema": super::SCHEMA_VERSION,
        "seed": spec.seed,
        "output": "fixture_run",
        "ranking": {
            "obs": "obs",
            "mask": "mask",
            "models": models,
        },
        "downscale": {
            "data": {"gcf": {"coarse": "downscale_data/coarse", "fine": "downscale_data/fine"}},
        },
    });
    let path = dir.join("config.json");
    write_json(STAGE, &path, &config)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PipelineConfig;

    #[test]
    fn fixture_config_validates() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { size: 20, days: 30, downscale_samples: 8, ..FixtureSpec::default() };
        let cfg = PipelineConfig::load(&write_fixture(dir.path(), &spec).unwrap()).unwrap();
        cfg.validate().unwrap();
        let mask = crate::geogrid::read_mask(&dir.path().join("mask")).unwrap();
        let census = mask.census();
        assert!(census.iter().all(|&c| c > 0), "{census:?}");
    }
}
