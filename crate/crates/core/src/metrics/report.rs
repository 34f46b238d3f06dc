use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{
    bias, extreme_errors, kge, nse, pdf_overlap, pearson_r, rmse, sd_diff, Metric, MetricError, PooledSample, Result,
};
use crate::geogrid::{DataCube, Season, ZoneMask, ZoneScope};

/// All skill metrics for one pooled sample. `None` marks a metric that is
/// undefined for this sample (see [`MetricReport::invalid`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bias: f64,
    pub rmse: f64,
    pub r: Option<f64>,
    pub r2: Option<f64>,
    pub nse: Option<f64>,
    pub kge: Option<f64>,
    pub pdf_overlap: f64,
    pub txx_err: Option<f64>,
    pub tnn_err: Option<f64>,
    pub sd_diff: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(s: &PooledSample, bins: usize) -> Result<Self> {
        let r = pearson_r(s).ok();
        let (txx, tnn) = extreme_errors(s);
        Ok(Self {
            bias: bias(s),
            rmse: rmse(s),
            r,
            r2: r.map(|r| r * r),
            nse: nse(s).ok(),
            kge: kge(s).ok(),
            pdf_overlap: pdf_overlap(s, bins)?,
            txx_err: txx.ok(),
            tnn_err: tnn.ok(),
            sd_diff: sd_diff(s),
            n: s.len(),
        })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Bias => Some(self.bias),
            Metric::Rmse => Some(self.rmse),
            Metric::R => self.r,
            Metric::R2 => self.r2,
            Metric::Nse => self.nse,
            Metric::Kge => self.kge,
            Metric::PdfOverlap => Some(self.pdf_overlap),
            Metric::TxxErr => self.txx_err,
            Metric::TnnErr => self.tnn_err,
            Metric::SdDiff => Some(self.sd_diff),
        }
    }

    /// Metrics flagged invalid for this sample.
    pub fn invalid(&self) -> Vec<Metric> {
        Metric::ALL.into_iter().filter(|&m| self.get(m).is_none()).collect()
    }
}

/// Pairs every (time, cell) where the zone and season match and neither
/// series is fill.
pub fn pool(model: &DataCube, obs: &DataCube, mask: &ZoneMask, zone: ZoneScope, season: Season) -> Result<PooledSample> {
    if model.lat() != obs.lat() || model.lon() != obs.lon() {
        return Err(MetricError::Cube("model and observation grids differ".into()));
    }
    if model.time() != obs.time() {
        return Err(MetricError::Cube("model and observation time axes differ".into()));
    }
    if &mask.lat != obs.lat() || &mask.lon != obs.lon() {
        return Err(MetricError::Cube("zone mask grid differs from the cube grid".into()));
    }
    let keep = zone.codes();
    let cells: Vec<usize> = mask.codes().iter().enumerate().filter(|(_, c)| keep.contains(c)).map(|(k, _)| k).collect();
    let mut m = Vec::new();
    let mut o = Vec::new();
    for (t, d) in obs.time().iter().enumerate() {
        if !season.contains(d.month) {
            continue;
        }
        let (ms, os) = (model.slice(t), obs.slice(t));
        for &k in &cells {
            if !model.is_fill(ms[k]) && !obs.is_fill(os[k]) {
                m.push(ms[k]);
                o.push(os[k]);
            }
        }
    }
    if m.len() < 2 {
        return Err(MetricError::EmptyPool(format!("{zone}/{season} ({} pairs)", m.len())));
    }
    Ok(PooledSample::new(m, o)?.with_variable(obs.variable().clone()))
}

pub fn full_report(
    model: &DataCube,
    obs: &DataCube,
    mask: &ZoneMask,
    zone: ZoneScope,
    season: Season,
    bins: usize,
) -> Result<MetricReport> {
    MetricReport::compute(&pool(model, obs, mask, zone, season)?, bins)
}

/// One output row: a report tagged with its model and context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub zone: ZoneScope,
    pub season: Season,
    pub report: MetricReport,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

/// CSV with one row per model x zone x season, one column per metric, the
/// sample size, and an `invalid` column listing flagged metrics.
pub fn write_reports_csv<W: Write>(rows: &[ReportRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string(), "zone".into(), "season".into()];
    header.extend(Metric::ALL.iter().map(|m| m.name().to_string()));
    header.extend(["n".to_string(), "invalid".into()]);
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.model.clone(), row.zone.to_string(), row.season.to_string()];
        rec.extend(Metric::ALL.iter().map(|&m| cell(row.report.get(m))));
        rec.push(row.report.n.to_string());
        rec.push(row.report.invalid().iter().map(|m| m.name()).collect::<Vec<_>>().join(";"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{synth_pair, SynthConfig, Zone};

    fn fixture() -> (DataCube, ZoneMask) {
        let (_, fine) = synth_pair(&SynthConfig::new(5, 2, 400, 4, 4, 0.0, 0.0)).unwrap();
        let codes = vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 0, 0, 1, 2, 3, 4];
        let mask = ZoneMask::new(fine.lat().clone(), fine.lon().clone(), codes).unwrap();
        (fine, mask)
    }

    #[test]
    fn perfect_model_row() {
        let (obs, mask) = fixture();
        let r = full_report(&obs, &obs, &mask, ZoneScope::Overall, Season::Annual, 100).unwrap();
        assert_eq!((r.bias, r.rmse), (0.0, 0.0));
        assert_eq!(r.r, Some(1.0));
        assert_eq!(r.nse, Some(1.0));
        assert_eq!(r.kge, Some(1.0));
        assert_eq!(r.pdf_overlap, 1.0);
        assert_eq!(r.n, 400 * 14);
    }

    #[test]
    fn shifted_model_row() {
        let (obs, mask) = fixture();
        let shifted = obs.with_data(obs.data().iter().map(|v| v + 2.0).collect()).unwrap();
        let r = full_report(&shifted, &obs, &mask, ZoneScope::Single(Zone::Temperate), Season::Jja, 100).unwrap();
        assert!((r.bias - 2.0).abs() < 1e-12);
        assert!((r.rmse - 2.0).abs() < 1e-12);
        assert!((r.r.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.sd_diff < 1e-12);
        // Tasmax sample: TNn does not apply.
        assert_eq!(r.invalid(), vec![Metric::TnnErr]);
    }

    #[test]
    fn zone_without_cells_is_an_error() {
        let (obs, mut mask) = fixture();
        mask = ZoneMask::new(mask.lat.clone(), mask.lon.clone(), mask.codes().iter().map(|&c| if c == 5 { 0 } else { c }).collect())
            .unwrap();
        assert!(matches!(
            full_report(&obs, &obs, &mask, ZoneScope::Single(Zone::Polar), Season::Annual, 100),
            Err(MetricError::EmptyPool(_))
        ));
    }

    #[test]
    fn csv_has_one_row_per_report() {
        let (obs, mask) = fixture();
        let report = full_report(&obs, &obs, &mask, ZoneScope::Overall, Season::Annual, 100).unwrap();
        let rows = vec![
            ReportRow { model: "a".into(), zone: ZoneScope::Overall, season: Season::Annual, report: report.clone() },
            ReportRow { model: "b".into(), zone: ZoneScope::Overall, season: Season::Djf, report },
        ];
        let mut buf = Vec::new();
        write_reports_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("model,zone,season,bias,rmse"));
        assert!(lines[1].ends_with(",tnn_err"));
    }
}
