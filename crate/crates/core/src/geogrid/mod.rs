//! Regular latitude/longitude gridded data: axes, daily cubes, zone masks and
//! the preprocessing steps applied before skill evaluation (regridding,
//! land masking, season selection, diurnal temperature range).

mod calendar;
mod gcf;
mod regrid;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calendar::{Calendar, Date, Season};
pub use gcf::{read_csv_cube, read_cube, read_header, read_mask, write_cube, write_mask, CsvMeta, GcfHeader};
pub use regrid::{regrid_bilinear, regrid_mask_nearest};
pub use synth::{block_mean, synth_pair, SynthConfig};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid axis '{axis}': {reason}")]
    Axis { axis: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("calendar violation: {date} is not a valid {calendar} date")]
    Calendar { date: Date, calendar: Calendar },
    #[error("time axis not strictly increasing at index {0}")]
    TimeOrder(usize),
    #[error("empty cube: {0}")]
    Empty(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid zone code {0}")]
    ZoneCode(u8),
    #[error("axis mismatch: {0}")]
    AxisMismatch(String),
    #[error("tasmin exceeds tasmax at {} cell(s), first at (t={}, lat={}, lon={})", .cells.len(), .cells[0].0, .cells[0].1, .cells[0].2)]
    NegativeDtr { cells: Vec<(usize, usize, usize)> },
    #[error("input row {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisKind {
    Lat,
    Lon,
}

/// Strictly increasing coordinate vector in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    kind: AxisKind,
    values: Vec<f64>,
}

impl GridAxis {
    pub fn new(kind: AxisKind, values: Vec<f64>) -> Result<Self> {
        let name = match kind {
            AxisKind::Lat => "lat",
            AxisKind::Lon => "lon",
        };
        let err = |reason: String| GridError::Axis { axis: name.to_string(), reason };
        // A single node is a legal destination axis (point sampling); the
        // interpolation routines require two nodes on their source axes.
        if values.is_empty() {
            return Err(err("no coordinate values".into()));
        }
        if let Some(i) = values.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(err(format!("not strictly increasing at index {}", i + 1)));
        }
        let (lo, hi) = (values[0], values[values.len() - 1]);
        let ok = match kind {
            AxisKind::Lat => lo >= -90.0 && hi <= 90.0,
            AxisKind::Lon => lo >= -180.0 && hi < 360.0,
        };
        if !ok || !lo.is_finite() || !hi.is_finite() {
            return Err(err(format!("coordinates [{lo}, {hi}] outside the allowed range")));
        }
        Ok(Self { kind, values })
    }

    pub fn lat(values: Vec<f64>) -> Result<Self> {
        Self::new(AxisKind::Lat, values)
    }

    pub fn lon(values: Vec<f64>) -> Result<Self> {
        Self::new(AxisKind::Lon, values)
    }

    /// `n` nodes starting at `start` with spacing `step`.
    pub fn regular(kind: AxisKind, start: f64, step: f64, n: usize) -> Result<Self> {
        Self::new(kind, (0..n).map(|i| start + step * i as f64).collect())
    }

    pub fn kind(&self) -> AxisKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Variable carried by a cube. Temperatures are in degrees Celsius.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Variable {
    Tasmax,
    Tasmin,
    Dtr,
    Other(String),
}

impl Variable {
    pub fn name(&self) -> &str {
        match self {
            Variable::Tasmax => "tasmax",
            Variable::Tasmin => "tasmin",
            Variable::Dtr => "dtr",
            Variable::Other(s) => s,
        }
    }
}

impl FromStr for Variable {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "tasmax" => Variable::Tasmax,
            "tasmin" => Variable::Tasmin,
            "dtr" => Variable::Dtr,
            other => Variable::Other(other.to_string()),
        })
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Variable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(s.parse().unwrap_or_else(|never| match never {}))
    }
}

pub const DEFAULT_FILL: f64 = -9999.0;

/// Cube-level metadata shared by every time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeMeta {
    pub variable: Variable,
    pub units: String,
    pub calendar: Calendar,
    pub fill: f64,
}

impl CubeMeta {
    pub fn celsius(variable: Variable, calendar: Calendar) -> Self {
        Self { variable, units: "degC".into(), calendar, fill: DEFAULT_FILL }
    }

    pub fn is_fill(&self, v: f64) -> bool {
        if self.fill.is_nan() {
            v.is_nan()
        } else {
            v == self.fill
        }
    }
}

/// A single 2-D (lat x lon) slice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub lat: GridAxis,
    pub lon: GridAxis,
    pub data: Vec<f64>,
    pub fill: f64,
    pub units: String,
}

impl GridField {
    pub fn new(lat: GridAxis, lon: GridAxis, data: Vec<f64>, fill: f64, units: impl Into<String>) -> Result<Self> {
        if data.len() != lat.len() * lon.len() {
            return Err(GridError::Shape(format!(
                "field has {} values, axes imply {}x{}",
                data.len(),
                lat.len(),
                lon.len()
            )));
        }
        Ok(Self { lat, lon, data, fill, units: units.into() })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.lon.len() + j]
    }
}

/// Daily (time x lat x lon) field, row-major with time slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    meta: CubeMeta,
    time: Vec<Date>,
    lat: GridAxis,
    lon: GridAxis,
    data: Vec<f64>,
}

impl DataCube {
    pub fn new(meta: CubeMeta, time: Vec<Date>, lat: GridAxis, lon: GridAxis, data: Vec<f64>) -> Result<Self> {
        if time.is_empty() {
            return Err(GridError::Empty("cube has no time steps".into()));
        }
        let expected = time.len() * lat.len() * lon.len();
        if data.len() != expected {
            return Err(GridError::Shape(format!(
                "payload has {} values, dims ({}, {}, {}) need {}",
                data.len(),
                time.len(),
                lat.len(),
                lon.len(),
                expected
            )));
        }
        for &d in &time {
            if !meta.calendar.is_valid(d) {
                return Err(GridError::Calendar { date: d, calendar: meta.calendar });
            }
        }
        if let Some(i) = time.windows(2).position(|w| w[1] <= w[0]) {
            return Err(GridError::TimeOrder(i + 1));
        }
        if let Some(i) = data.iter().position(|&v| !meta.is_fill(v) && !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { meta, time, lat, lon, data })
    }

    pub fn meta(&self) -> &CubeMeta {
        &self.meta
    }

    pub fn variable(&self) -> &Variable {
        &self.meta.variable
    }

    pub fn calendar(&self) -> Calendar {
        self.meta.calendar
    }

    pub fn fill(&self) -> f64 {
        self.meta.fill
    }

    pub fn is_fill(&self, v: f64) -> bool {
        self.meta.is_fill(v)
    }

    pub fn time(&self) -> &[Date] {
        &self.time
    }

    pub fn lat(&self) -> &GridAxis {
        &self.lat
    }

    pub fn lon(&self) -> &GridAxis {
        &self.lon
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// (nt, nlat, nlon)
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.time.len(), self.lat.len(), self.lon.len())
    }

    pub fn cells(&self) -> usize {
        self.lat.len() * self.lon.len()
    }

    pub fn slice(&self, t: usize) -> &[f64] {
        let c = self.cells();
        &self.data[t * c..(t + 1) * c]
    }

    pub fn field(&self, t: usize) -> GridField {
        GridField {
            lat: self.lat.clone(),
            lon: self.lon.clone(),
            data: self.slice(t).to_vec(),
            fill: self.meta.fill,
            units: self.meta.units.clone(),
        }
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> f64 {
        self.data[(t * self.lat.len() + i) * self.lon.len() + j]
    }

    /// Same axes and calendar, new payload.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.meta.clone(), self.time.clone(), self.lat.clone(), self.lon.clone(), data)
    }

    pub fn with_variable(mut self, variable: Variable) -> Self {
        self.meta.variable = variable;
        self
    }

    pub fn fill_count(&self) -> usize {
        self.data.iter().filter(|&&v| self.is_fill(v)).count()
    }

    pub fn same_grid(&self, other_lat: &GridAxis, other_lon: &GridAxis) -> bool {
        self.lat == *other_lat && self.lon == *other_lon
    }

    /// Restrict to time steps whose month lies in `season`. Winter pools every
    /// December, January and February day of the period.
    pub fn select_season(&self, season: Season) -> Result<Self> {
        let c = self.cells();
        let mut time = Vec::new();
        let mut data = Vec::new();
        for (t, d) in self.time.iter().enumerate() {
            if season.contains(d.month) {
                time.push(*d);
                data.extend_from_slice(&self.data[t * c..(t + 1) * c]);
            }
        }
        if time.is_empty() {
            return Err(GridError::Empty(format!("no {season} time steps")));
        }
        Self::new(self.meta.clone(), time, self.lat.clone(), self.lon.clone(), data)
    }

    /// Replace every cell whose zone code is not in `keep` with the fill value.
    pub fn apply_mask(&self, mask: &ZoneMask, keep: &BTreeSet<u8>) -> Result<Self> {
        if !self.same_grid(&mask.lat, &mask.lon) {
            return Err(GridError::AxisMismatch("mask grid differs from cube grid; regrid the mask first".into()));
        }
        let c = self.cells();
        let fill = self.meta.fill;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(k, &v)| if keep.contains(&mask.codes[k % c]) { v } else { fill })
            .collect();
        Self::new(self.meta.clone(), self.time.clone(), self.lat.clone(), self.lon.clone(), data)
    }
}

/// Elementwise `tasmax - tasmin`. Fails (listing every offending cell) if
/// tasmin exceeds tasmax anywhere both are defined.
pub fn derive_dtr(tasmax: &DataCube, tasmin: &DataCube) -> Result<DataCube> {
    if tasmax.lat != tasmin.lat || tasmax.lon != tasmin.lon {
        return Err(GridError::AxisMismatch("tasmax and tasmin grids differ".into()));
    }
    if tasmax.time != tasmin.time || tasmax.calendar() != tasmin.calendar() {
        return Err(GridError::AxisMismatch("tasmax and tasmin time axes differ".into()));
    }
    if tasmax.meta.units != tasmin.meta.units {
        return Err(GridError::Invalid(format!(
            "unit mismatch: tasmax in {}, tasmin in {}",
            tasmax.meta.units, tasmin.meta.units
        )));
    }
    let (_, nlat, nlon) = tasmax.dims();
    let fill = tasmax.fill();
    let mut bad = Vec::new();
    let data: Vec<f64> = tasmax
        .data
        .iter()
        .zip(&tasmin.data)
        .enumerate()
        .map(|(k, (&hi, &lo))| {
            if tasmax.is_fill(hi) || tasmin.is_fill(lo) {
                fill
            } else {
                if lo > hi {
                    bad.push((k / (nlat * nlon), (k / nlon) % nlat, k % nlon));
                }
                hi - lo
            }
        })
        .collect();
    if !bad.is_empty() {
        return Err(GridError::NegativeDtr { cells: bad });
    }
    let meta = CubeMeta { variable: Variable::Dtr, ..tasmax.meta.clone() };
    DataCube::new(meta, tasmax.time.clone(), tasmax.lat.clone(), tasmax.lon.clone(), data)
}

/// Major climate classes. Code 0 marks ocean or unclassified cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Zone {
    Tropical = 1,
    Arid = 2,
    Temperate = 3,
    Continental = 4,
    Polar = 5,
}

impl Zone {
    pub const ALL: [Zone; 5] = [Zone::Tropical, Zone::Arid, Zone::Temperate, Zone::Continental, Zone::Polar];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Zone> {
        Zone::ALL.into_iter().find(|z| z.code() == code)
    }

    pub fn label(self) -> &'static str {
        match self {
            Zone::Tropical => "Tropical",
            Zone::Arid => "Arid",
            Zone::Temperate => "Temperate",
            Zone::Continental => "Continental",
            Zone::Polar => "Polar",
        }
    }
}

/// A single zone or the union of all land zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ZoneScope {
    Single(Zone),
    Overall,
}

impl ZoneScope {
    pub const ALL: [ZoneScope; 6] = [
        ZoneScope::Single(Zone::Tropical),
        ZoneScope::Single(Zone::Arid),
        ZoneScope::Single(Zone::Temperate),
        ZoneScope::Single(Zone::Continental),
        ZoneScope::Single(Zone::Polar),
        ZoneScope::Overall,
    ];

    pub fn codes(self) -> BTreeSet<u8> {
        match self {
            ZoneScope::Single(z) => BTreeSet::from([z.code()]),
            ZoneScope::Overall => Zone::ALL.iter().map(|z| z.code()).collect(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ZoneScope::Single(z) => z.label(),
            ZoneScope::Overall => "Overall",
        }
    }
}

impl fmt::Display for ZoneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ZoneScope {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "overall" || lower == "all" {
            return Ok(ZoneScope::Overall);
        }
        Zone::ALL
            .into_iter()
            .find(|z| z.label().eq_ignore_ascii_case(s))
            .map(ZoneScope::Single)
            .ok_or_else(|| GridError::Invalid(format!("unknown zone '{s}'")))
    }
}

impl Serialize for ZoneScope {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for ZoneScope {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-cell climate-zone codes on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMask {
    pub lat: GridAxis,
    pub lon: GridAxis,
    codes: Vec<u8>,
}

impl ZoneMask {
    pub fn new(lat: GridAxis, lon: GridAxis, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != lat.len() * lon.len() {
            return Err(GridError::Shape(format!(
                "mask has {} codes, axes imply {}x{}",
                codes.len(),
                lat.len(),
                lon.len()
            )));
        }
        if let Some(&c) = codes.iter().find(|&&c| c > 5) {
            return Err(GridError::ZoneCode(c));
        }
        Ok(Self { lat, lon, codes })
    }

    /// Every cell assigned to `zone`.
    pub fn uniform(lat: GridAxis, lon: GridAxis, zone: Zone) -> Self {
        let n = lat.len() * lon.len();
        Self { lat, lon, codes: vec![zone.code(); n] }
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.codes[i * self.lon.len() + j]
    }

    /// Number of cells carrying each code 0..=5.
    pub fn census(&self) -> [usize; 6] {
        let mut out = [0; 6];
        for &c in &self.codes {
            out[c as usize] += 1;
        }
        out
    }
}
