//! Skill metrics over pooled model/observation pairs.
//!
//! Standard deviations use the population (1/n) convention throughout so the
//! KGE variability term and `sd_diff` agree. Metrics that are undefined for a
//! degenerate sample (constant series, zero mean) come back as `Err` and are
//! carried as `None` in a [`MetricReport`] rather than as NaN.

mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geogrid::Variable;

pub use report::{full_report, pool, write_reports_csv, MetricReport, ReportRow};

pub const DEFAULT_PDF_BINS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("sample needs at least 2 paired values, got {0}")]
    TooSmall(usize),
    #[error("model and observation lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in sample at index {0}")]
    NonFinite(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("zero mean in {0}")]
    ZeroMean(&'static str),
    #[error("need at least 2 bins, got {0}")]
    Bins(usize),
    #[error("metric not defined for variable {0}")]
    NotApplicable(String),
    #[error("empty pooled sample for {0}")]
    EmptyPool(String),
    #[error("cube mismatch: {0}")]
    Cube(String),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Every metric the suite computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bias,
    Rmse,
    R,
    R2,
    Nse,
    Kge,
    PdfOverlap,
    TxxErr,
    TnnErr,
    SdDiff,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Bias,
        Metric::Rmse,
        Metric::R,
        Metric::R2,
        Metric::Nse,
        Metric::Kge,
        Metric::PdfOverlap,
        Metric::TxxErr,
        Metric::TnnErr,
        Metric::SdDiff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bias => "bias",
            Metric::Rmse => "rmse",
            Metric::R => "r",
            Metric::R2 => "r2",
            Metric::Nse => "nse",
            Metric::Kge => "kge",
            Metric::PdfOverlap => "pdf_overlap",
            Metric::TxxErr => "txx_err",
            Metric::TnnErr => "tnn_err",
            Metric::SdDiff => "sd_diff",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MetricError::NotApplicable(format!("unknown metric '{s}'")))
    }
}

/// Paired model (`M`) and observed (`O`) values with fill already excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSample {
    model: Vec<f64>,
    obs: Vec<f64>,
    variable: Option<Variable>,
}

impl PooledSample {
    pub fn new(model: Vec<f64>, obs: Vec<f64>) -> Result<Self> {
        if model.len() != obs.len() {
            return Err(MetricError::LengthMismatch(model.len(), obs.len()));
        }
        if model.len() < 2 {
            return Err(MetricError::TooSmall(model.len()));
        }
        if let Some(i) = model.iter().chain(&obs).position(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite(i % model.len()));
        }
        Ok(Self { model, obs, variable: None })
    }

    /// Tag the sample with the variable it was pooled from; this decides
    /// which extreme index applies.
    pub fn with_variable(mut self, variable: Variable) -> Self {
        self.variable = Some(variable);
        self
    }

    pub fn model(&self) -> &[f64] {
        &self.model
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs
    }

    pub fn variable(&self) -> Option<&Variable> {
        self.variable.as_ref()
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation, two-pass.
fn std_pop(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn bias(s: &PooledSample) -> f64 {
    mean(&s.model) - mean(&s.obs)
}

pub fn rmse(s: &PooledSample) -> f64 {
    let sq: f64 = s.model.iter().zip(&s.obs).map(|(m, o)| (m - o) * (m - o)).sum();
    (sq / s.len() as f64).sqrt()
}

pub fn pearson_r(s: &PooledSample) -> Result<f64> {
    let (mm, mo) = (mean(&s.model), mean(&s.obs));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (m, o) in s.model.iter().zip(&s.obs) {
        let (dm, d_o) = (m - mm, o - mo);
        sxy += dm * d_o;
        sxx += dm * dm;
        syy += d_o * d_o;
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance("model"));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance("observations"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn nse(s: &PooledSample) -> Result<f64> {
    let mo = mean(&s.obs);
    let (mut num, mut den) = (0.0, 0.0);
    for (m, o) in s.model.iter().zip(&s.obs) {
        num += (o - m) * (o - m);
        den += (o - mo) * (o - mo);
    }
    if den == 0.0 {
        return Err(MetricError::ZeroVariance("observations"));
    }
    Ok(1.0 - num / den)
}

/// Kling-Gupta efficiency with `beta = mu_M / mu_O` and the variability term
/// taken as the ratio of coefficients of variation.
pub fn kge(s: &PooledSample) -> Result<f64> {
    let (mu_m, mu_o) = (mean(&s.model), mean(&s.obs));
    if mu_o == 0.0 {
        return Err(MetricError::ZeroMean("observations"));
    }
    if mu_m == 0.0 {
        return Err(MetricError::ZeroMean("model"));
    }
    let (sd_m, sd_o) = (std_pop(&s.model), std_pop(&s.obs));
    if sd_o == 0.0 {
        return Err(MetricError::ZeroVariance("observations"));
    }
    let r = pearson_r(s)?;
    let beta = mu_m / mu_o;
    let gamma = (sd_m / mu_m) / (sd_o / mu_o);
    Ok(1.0 - ((r - 1.0).powi(2) + (beta - 1.0).powi(2) + (gamma - 1.0).powi(2)).sqrt())
}

/// Histogram overlap `sum_b min(p_b, q_b)` over `bins` equal-width bins that
/// span the pooled range of both series.
pub fn pdf_overlap(s: &PooledSample, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(MetricError::Bins(bins));
    }
    let lo = s.model.iter().chain(&s.obs).copied().fold(f64::INFINITY, f64::min);
    let hi = s.model.iter().chain(&s.obs).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(1.0);
    }
    let span = hi - lo;
    let bin_of = |v: f64| (((v - lo) / span * bins as f64) as usize).min(bins - 1);
    let mut p = vec![0usize; bins];
    let mut q = vec![0usize; bins];
    for (&m, &o) in s.model.iter().zip(&s.obs) {
        p[bin_of(m)] += 1;
        q[bin_of(o)] += 1;
    }
    let shared: usize = p.iter().zip(&q).map(|(&a, &b)| a.min(b)).sum();
    Ok(shared as f64 / s.len() as f64)
}

/// `(|max M - max O|, |min M - min O|)`, gated on the sample's variable:
/// TXx applies to tasmax, TNn to tasmin, both to untagged or other variables.
pub fn extreme_errors(s: &PooledSample) -> (Result<f64>, Result<f64>) {
    let max = |xs: &[f64]| xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = |xs: &[f64]| xs.iter().copied().fold(f64::INFINITY, f64::min);
    let txx = (max(&s.model) - max(&s.obs)).abs();
    let tnn = (min(&s.model) - min(&s.obs)).abs();
    let na = |v: &Variable| Err(MetricError::NotApplicable(v.name().to_string()));
    match &s.variable {
        Some(v @ Variable::Tasmax) => (Ok(txx), na(v)),
        Some(v @ Variable::Tasmin) => (na(v), Ok(tnn)),
        _ => (Ok(txx), Ok(tnn)),
    }
}

pub fn sd_diff(s: &PooledSample) -> f64 {
    (std_pop(&s.model) - std_pop(&s.obs)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(m: &[f64], o: &[f64]) -> PooledSample {
        PooledSample::new(m.to_vec(), o.to_vec()).unwrap()
    }

    const M: [f64; 3] = [2.0, 2.0, 2.0];
    const O: [f64; 3] = [1.0, 2.0, 4.0];

    #[test]
    fn hand_arithmetic_cases() {
        let s = sample(&M, &O);
        assert!((bias(&s) - (-1.0 / 3.0)).abs() < 1e-15);
        assert!((rmse(&s) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((rmse(&s) - 1.29099).abs() < 1e-5);
        assert!((nse(&s).unwrap() - (-1.0 / 14.0)).abs() < 1e-15);
        assert!((pearson_r(&sample(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_series() {
        let x = [3.0, -1.0, 7.5, 2.0];
        let s = sample(&x, &x);
        assert_eq!(bias(&s), 0.0);
        assert_eq!(rmse(&s), 0.0);
        assert_eq!(pearson_r(&s).unwrap(), 1.0);
        assert_eq!(nse(&s).unwrap(), 1.0);
        assert_eq!(kge(&s).unwrap(), 1.0);
        assert_eq!(pdf_overlap(&s, DEFAULT_PDF_BINS).unwrap(), 1.0);
        assert_eq!(sd_diff(&s), 0.0);
        let (txx, tnn) = extreme_errors(&s);
        assert_eq!((txx.unwrap(), tnn.unwrap()), (0.0, 0.0));
    }

    #[test]
    fn constant_shift() {
        let o = [1.0, 4.0, -2.0, 0.5];
        let m: Vec<f64> = o.iter().map(|v| v + 2.0).collect();
        let s = sample(&m, &o);
        assert!((bias(&s) - 2.0).abs() < 1e-15);
        assert!((rmse(&s) - 2.0).abs() < 1e-15);
        assert!(sd_diff(&s) < 1e-15);
        let neg: Vec<f64> = o.iter().map(|v| v - 3.0).collect();
        assert!((rmse(&sample(&neg, &o)) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn anti_correlation() {
        let o = [1.0, 4.0, -2.0, 0.5];
        let m: Vec<f64> = o.iter().map(|v| -v).collect();
        assert_eq!(pearson_r(&sample(&m, &o)).unwrap(), -1.0);
    }

    #[test]
    fn climatology_baseline_nse_is_zero() {
        let o = [1.0, 4.0, -2.0, 0.5, 3.0];
        let mu = mean(&o);
        let m = vec![mu; o.len()];
        assert_eq!(nse(&sample(&m, &o)).unwrap(), 0.0);
    }

    #[test]
    fn kge_of_doubled_series_is_zero() {
        // r = 1, beta = 2, gamma = 1.
        let o = [1.0, 2.0, 3.0, 5.0];
        let m: Vec<f64> = o.iter().map(|v| 2.0 * v).collect();
        assert!(kge(&sample(&m, &o)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_samples_are_flagged() {
        let s = sample(&[1.0, 2.0], &[3.0, 3.0]);
        assert_eq!(pearson_r(&s), Err(MetricError::ZeroVariance("observations")));
        assert!(nse(&s).is_err());
        assert_eq!(kge(&sample(&[1.0, 2.0], &[-1.0, 1.0])), Err(MetricError::ZeroMean("observations")));
        assert!(pearson_r(&sample(&[2.0, 2.0], &[1.0, 3.0])).is_err());
    }

    #[test]
    fn pdf_overlap_cases() {
        let disjoint = sample(&[0.0, 0.5, 1.0], &[10.0, 10.5, 11.0]);
        assert_eq!(pdf_overlap(&disjoint, 100).unwrap(), 0.0);
        // n/2 zeros + n/2 ones vs all zeros, two bins.
        let half = sample(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(pdf_overlap(&half, 2).unwrap(), 0.5);
        let flat = sample(&[4.0, 4.0], &[4.0, 4.0]);
        assert_eq!(pdf_overlap(&flat, 10).unwrap(), 1.0);
        assert_eq!(pdf_overlap(&half, 1), Err(MetricError::Bins(1)));
    }

    #[test]
    fn extremes_follow_variable() {
        let s = sample(&[30.0, 10.0, -25.0], &[28.0, 11.0, -20.0]);
        let (txx, tnn) = extreme_errors(&s);
        assert_eq!(txx.unwrap(), 2.0);
        assert_eq!(tnn.unwrap(), 5.0);
        let (txx, tnn) = extreme_errors(&s.clone().with_variable(Variable::Tasmax));
        assert_eq!(txx.unwrap(), 2.0);
        assert!(tnn.is_err());
        let (txx, tnn) = extreme_errors(&s.with_variable(Variable::Tasmin));
        assert!(txx.is_err());
        assert_eq!(tnn.unwrap(), 5.0);
    }

    #[test]
    fn sd_diff_two_point_series() {
        // {-3, 3} has population sd 3, {-1, 1} has sd 1.
        let s = sample(&[-3.0, 3.0], &[-1.0, 1.0]);
        assert_eq!(sd_diff(&s), 2.0);
    }

    #[test]
    fn sample_validation() {
        assert_eq!(PooledSample::new(vec![1.0], vec![1.0]), Err(MetricError::TooSmall(1)));
        assert_eq!(PooledSample::new(vec![1.0, 2.0], vec![1.0]), Err(MetricError::LengthMismatch(2, 1)));
        assert!(matches!(PooledSample::new(vec![1.0, f64::NAN], vec![1.0, 2.0]), Err(MetricError::NonFinite(1))));
    }
}
