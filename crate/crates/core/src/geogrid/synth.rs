//! Synthetic coarse/fine cube pairs with learnable sub-grid structure.
//!
//! The fine field is a fixed-count mixture of sinusoids: a seasonal cycle, a
//! latitude gradient, large-scale travelling waves that change from day to day,
//! and a static small-scale pattern (an orography stand-in) whose amplitude
//! follows the season. The coarse field is the block mean of the fine field
//! plus a constant bias and i.i.d. Gaussian noise.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{AxisKind, Calendar, CubeMeta, DataCube, Date, GridAxis, GridError, Result, Variable};
use crate::rng::SplitMix64;

const STATIC_MODES: usize = 6;
const TRAVELLING_MODES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub coarse_factor: usize,
    pub nt: usize,
    pub nlat: usize,
    pub nlon: usize,
    pub bias: f64,
    pub noise_sd: f64,
    #[serde(default = "default_variable")]
    pub variable: Variable,
    #[serde(default = "default_calendar")]
    pub calendar: Calendar,
    #[serde(default = "default_start")]
    pub start: Date,
    /// South-west fine-grid node and spacing, degrees.
    #[serde(default = "default_origin")]
    pub origin: (f64, f64),
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_variable() -> Variable {
    Variable::Tasmax
}
fn default_calendar() -> Calendar {
    Calendar::NoLeap
}
fn default_start() -> Date {
    Date::new(1985, 1, 1)
}
fn default_origin() -> (f64, f64) {
    (45.05, 5.05)
}
fn default_step() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn new(seed: u64, coarse_factor: usize, nt: usize, nlat: usize, nlon: usize, bias: f64, noise_sd: f64) -> Self {
        Self {
            seed,
            coarse_factor,
            nt,
            nlat,
            nlon,
            bias,
            noise_sd,
            variable: default_variable(),
            calendar: default_calendar(),
            start: default_start(),
            origin: default_origin(),
            step: default_step(),
        }
    }
}

struct Mode {
    ky: f64,
    kx: f64,
    phase: f64,
    amp: f64,
    /// Radians per day; zero for static modes.
    omega: f64,
}

impl Mode {
    fn eval(&self, u: f64, v: f64, day: f64) -> f64 {
        self.amp * (TAU * (self.ky * u + self.kx * v) - self.omega * day + self.phase).sin()
    }
}

fn draw_modes(rng: &mut SplitMix64, cfg: &SynthConfig) -> (Vec<Mode>, Vec<Mode>) {
    let f = cfg.coarse_factor as f64;
    // Static modes: wavelengths between 1.5 and 4 coarse cells, so they are
    // at or below the coarse grid's resolving limit.
    let statics = (0..STATIC_MODES)
        .map(|_| {
            let cells = rng.uniform(1.5 * f, 4.0 * f);
            let theta = rng.uniform(0.0, TAU);
            Mode {
                ky: cfg.nlat as f64 / cells * theta.sin(),
                kx: cfg.nlon as f64 / cells * theta.cos(),
                phase: rng.uniform(0.0, TAU),
                amp: rng.uniform(0.8, 1.6),
                omega: 0.0,
            }
        })
        .collect();
    let travelling = (0..TRAVELLING_MODES)
        .map(|_| Mode {
            ky: rng.uniform(-1.0, 1.0),
            kx: rng.uniform(-1.0, 1.0),
            phase: rng.uniform(0.0, TAU),
            amp: rng.uniform(1.5, 3.5),
            omega: TAU / rng.uniform(5.0, 30.0),
        })
        .collect();
    (statics, travelling)
}

fn day_of_year(calendar: Calendar, d: Date) -> f64 {
    (1..d.month).map(|m| calendar.days_in_month(d.year, m) as f64).sum::<f64>() + d.day as f64 - 1.0
}

/// Returns `(coarse, fine)` sharing one daily time axis.
pub fn synth_pair(cfg: &SynthConfig) -> Result<(DataCube, DataCube)> {
    let f = cfg.coarse_factor;
    if f < 2 {
        return Err(GridError::Invalid(format!("coarse factor must be >= 2, got {f}")));
    }
    if cfg.nlat % f != 0 || cfg.nlon % f != 0 {
        return Err(GridError::Invalid(format!(
            "coarse factor {f} does not divide the fine grid {}x{}",
            cfg.nlat, cfg.nlon
        )));
    }
    if cfg.nt == 0 {
        return Err(GridError::Empty("nt = 0".into()));
    }
    let mut rng = SplitMix64::stream(cfg.seed, 0x5eed);
    let (statics, travelling) = draw_modes(&mut rng, cfg);
    let mut noise_rng = rng.split(1);

    let (nt, nlat, nlon) = (cfg.nt, cfg.nlat, cfg.nlon);
    let time = cfg.calendar.daily_series(cfg.start, nt);
    let lat = GridAxis::regular(AxisKind::Lat, cfg.origin.0, cfg.step, nlat)?;
    let lon = GridAxis::regular(AxisKind::Lon, cfg.origin.1, cfg.step, nlon)?;

    let static_field: Vec<f64> = (0..nlat * nlon)
        .map(|k| {
            let (u, v) = ((k / nlon) as f64 / nlat as f64, (k % nlon) as f64 / nlon as f64);
            statics.iter().map(|m| m.eval(u, v, 0.0)).sum()
        })
        .collect();

    let mut fine = Vec::with_capacity(nt * nlat * nlon);
    for (t, d) in time.iter().enumerate() {
        let year_len = cfg.calendar.days_in_year(d.year) as f64;
        let season = (TAU * (day_of_year(cfg.calendar, *d) - 105.0) / year_len).sin();
        let day = t as f64;
        for i in 0..nlat {
            let u = i as f64 / nlat as f64;
            for j in 0..nlon {
                let v = j as f64 / nlon as f64;
                let large: f64 = travelling.iter().map(|m| m.eval(u, v, day)).sum();
                let value = 12.0 + 8.0 * season - 4.0 * u + large + (1.0 + 0.3 * season) * static_field[i * nlon + j];
                fine.push(value);
            }
        }
    }

    let (clat, clon) = (nlat / f, nlon / f);
    let block_centre = |axis: &GridAxis, n: usize| -> Vec<f64> {
        (0..n).map(|b| axis.values()[b * f..(b + 1) * f].iter().sum::<f64>() / f as f64).collect()
    };
    let coarse_lat = GridAxis::lat(block_centre(&lat, clat))?;
    let coarse_lon = GridAxis::lon(block_centre(&lon, clon))?;
    let inv = 1.0 / (f * f) as f64;
    let mut coarse = Vec::with_capacity(nt * clat * clon);
    for t in 0..nt {
        let slice = &fine[t * nlat * nlon..(t + 1) * nlat * nlon];
        for bi in 0..clat {
            for bj in 0..clon {
                let mut acc = 0.0;
                for i in bi * f..(bi + 1) * f {
                    for j in bj * f..(bj + 1) * f {
                        acc += slice[i * nlon + j];
                    }
                }
                let noise = if cfg.noise_sd > 0.0 { cfg.noise_sd * noise_rng.normal() } else { 0.0 };
                coarse.push(acc * inv + cfg.bias + noise);
            }
        }
    }

    let meta = CubeMeta::celsius(cfg.variable.clone(), cfg.calendar);
    let fine_cube = DataCube::new(meta.clone(), time.clone(), lat, lon, fine)?;
    let coarse_cube = DataCube::new(meta, time, coarse_lat, coarse_lon, coarse)?;
    Ok((coarse_cube, fine_cube))
}

/// Block mean of every time slice by `factor` in both directions.
pub fn block_mean(cube: &DataCube, factor: usize) -> Vec<f64> {
    let (nt, nlat, nlon) = cube.dims();
    let (clat, clon) = (nlat / factor, nlon / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(nt * clat * clon);
    for t in 0..nt {
        let s = cube.slice(t);
        for bi in 0..clat {
            for bj in 0..clon {
                let mut acc = 0.0;
                for i in bi * factor..(bi + 1) * factor {
                    for j in bj * factor..(bj + 1) * factor {
                        acc += s[i * nlon + j];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}
