//! Gridded Climate Format: a directory holding `header.json` and `data.bin`
//! (little-endian `f32`, time-major row-major, exactly `nt*nlat*nlon` values).
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write, so a
//! cube whose values are already `f32`-representable round-trips bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Calendar, CubeMeta, DataCube, Date, GridAxis, GridError, Result, Variable, ZoneMask};

pub const HEADER_FILE: &str = "header.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcfHeader {
    pub variable: String,
    pub units: String,
    pub calendar: Calendar,
    /// `null` encodes a NaN sentinel.
    pub fill_value: Option<f64>,
    pub dims: [usize; 3],
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    pub time: Vec<Date>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GridError + '_ {
    move |source| GridError::Io { path: path.display().to_string(), source }
}

pub fn read_header(dir: &Path) -> Result<GcfHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let header: GcfHeader = serde_json::from_str(&text).map_err(|e| GridError::Header(format!("{}: {e}", path.display())))?;
    let [nt, nlat, nlon] = header.dims;
    if header.lat.len() != nlat || header.lon.len() != nlon || header.time.len() != nt {
        return Err(GridError::Header(format!(
            "dims {:?} disagree with coordinate lengths (time {}, lat {}, lon {})",
            header.dims,
            header.time.len(),
            header.lat.len(),
            header.lon.len()
        )));
    }
    Ok(header)
}

fn read_payload(dir: &Path, expected: usize) -> Result<Vec<f64>> {
    let path = dir.join(DATA_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(GridError::Shape(format!(
            "{} holds {} bytes, header implies {} float32 values ({} bytes)",
            path.display(),
            bytes.len(),
            expected,
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn read_cube(dir: &Path) -> Result<DataCube> {
    let h = read_header(dir)?;
    let [nt, nlat, nlon] = h.dims;
    let data = read_payload(dir, nt * nlat * nlon)?;
    let meta = CubeMeta {
        variable: h.variable.parse().unwrap_or_else(|never| match never {}),
        units: h.units,
        calendar: h.calendar,
        fill: h.fill_value.unwrap_or(f64::NAN),
    };
    DataCube::new(meta, h.time, GridAxis::lat(h.lat)?, GridAxis::lon(h.lon)?, data)
}

fn write_gcf(dir: &Path, header: &GcfHeader, values: impl Iterator<Item = f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let hpath = dir.join(HEADER_FILE);
    let json = serde_json::to_string_pretty(header).map_err(|e| GridError::Header(e.to_string()))?;
    fs::write(&hpath, json).map_err(io_err(&hpath))?;
    let dpath = dir.join(DATA_FILE);
    let file = fs::File::create(&dpath).map_err(io_err(&dpath))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err(&dpath))?;
    }
    w.flush().map_err(io_err(&dpath))
}

pub fn write_cube(cube: &DataCube, dir: &Path) -> Result<()> {
    let (nt, nlat, nlon) = cube.dims();
    let meta = cube.meta();
    let header = GcfHeader {
        variable: meta.variable.name().to_string(),
        units: meta.units.clone(),
        calendar: meta.calendar,
        fill_value: if meta.fill.is_nan() { None } else { Some(meta.fill) },
        dims: [nt, nlat, nlon],
        lat: cube.lat().values().to_vec(),
        lon: cube.lon().values().to_vec(),
        time: cube.time().to_vec(),
    };
    write_gcf(dir, &header, cube.data().iter().copied())
}

const MASK_DATE: Date = Date::new(2000, 1, 1);

pub fn write_mask(mask: &ZoneMask, dir: &Path) -> Result<()> {
    let header = GcfHeader {
        variable: "zone".into(),
        units: "1".into(),
        calendar: Calendar::Standard,
        fill_value: Some(0.0),
        dims: [1, mask.lat.len(), mask.lon.len()],
        lat: mask.lat.values().to_vec(),
        lon: mask.lon.values().to_vec(),
        time: vec![MASK_DATE],
    };
    write_gcf(dir, &header, mask.codes().iter().map(|&c| c as f64))
}

pub fn read_mask(dir: &Path) -> Result<ZoneMask> {
    let h = read_header(dir)?;
    let [nt, nlat, nlon] = h.dims;
    if nt != 1 {
        return Err(GridError::Header(format!("zone mask must have nt = 1, found {nt}")));
    }
    let values = read_payload(dir, nlat * nlon)?;
    let codes = values
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || !(0.0..=5.0).contains(&v) {
                Err(GridError::Invalid(format!("zone mask value {v} is not an integer code in 0..=5")))
            } else {
                Ok(v as u8)
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    ZoneMask::new(GridAxis::lat(h.lat)?, GridAxis::lon(h.lon)?, codes)
}

/// Metadata the CSV path cannot carry itself.
#[derive(Debug, Clone)]
pub struct CsvMeta {
    pub variable: Variable,
    pub units: String,
    pub calendar: Calendar,
    pub fill: f64,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    date: String,
    lat: f64,
    lon: f64,
    value: Option<f64>,
}

fn coord_key(v: f64) -> u64 {
    // Canonical bits so -0.0 and 0.0 compare equal.
    (v + 0.0).to_bits()
}

/// Long-format CSV (`date,lat,lon,value`) to a cube. Every
/// (date, lat, lon) combination must occur exactly once; empty values are fill.
pub fn read_csv_cube(path: &Path, meta: &CsvMeta) -> Result<DataCube> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| GridError::Csv { line: 0, reason: e.to_string() })?;
    let mut cells: BTreeMap<(Date, u64, u64), f64> = BTreeMap::new();
    let mut lats = BTreeMap::new();
    let mut lons = BTreeMap::new();
    let mut dates = BTreeSet::new();
    for (k, row) in reader.deserialize::<CsvRow>().enumerate() {
        // Line 1 is the header row.
        let line = k + 2;
        let row = row.map_err(|e| GridError::Csv { line, reason: e.to_string() })?;
        let date: Date = row.date.parse().map_err(|e: GridError| GridError::Csv { line, reason: e.to_string() })?;
        if !meta.calendar.is_valid(date) {
            return Err(GridError::Csv { line, reason: format!("{date} is not a valid {} date", meta.calendar) });
        }
        let value = row.value.unwrap_or(meta.fill);
        let key = (date, coord_key(row.lat), coord_key(row.lon));
        if cells.insert(key, value).is_some() {
            return Err(GridError::Csv {
                line,
                reason: format!("duplicate entry for ({date}, {}, {})", row.lat, row.lon),
            });
        }
        dates.insert(date);
        lats.insert(coord_key(row.lat), row.lat);
        lons.insert(coord_key(row.lon), row.lon);
    }
    if cells.is_empty() {
        return Err(GridError::Csv { line: 1, reason: "no data rows".into() });
    }
    let mut lat_vals: Vec<f64> = lats.values().copied().collect();
    let mut lon_vals: Vec<f64> = lons.values().copied().collect();
    lat_vals.sort_by(f64::total_cmp);
    lon_vals.sort_by(f64::total_cmp);
    let mut data = Vec::with_capacity(dates.len() * lat_vals.len() * lon_vals.len());
    let mut gaps = Vec::new();
    for &d in &dates {
        for &y in &lat_vals {
            for &x in &lon_vals {
                match cells.get(&(d, coord_key(y), coord_key(x))) {
                    Some(&v) => data.push(v),
                    None => {
                        gaps.push(format!("({d}, {y}, {x})"));
                        data.push(meta.fill);
                    }
                }
            }
        }
    }
    if !gaps.is_empty() {
        let shown: Vec<_> = gaps.iter().take(10).cloned().collect();
        return Err(GridError::Invalid(format!(
            "ragged grid: {} missing (date, lat, lon) entries: {}{}",
            gaps.len(),
            shown.join(", "),
            if gaps.len() > 10 { ", ..." } else { "" }
        )));
    }
    let cube_meta = CubeMeta {
        variable: meta.variable.clone(),
        units: meta.units.clone(),
        calendar: meta.calendar,
        fill: meta.fill,
    };
    DataCube::new(cube_meta, dates.into_iter().collect(), GridAxis::lat(lat_vals)?, GridAxis::lon(lon_vals)?, data)
}
