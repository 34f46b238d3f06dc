//! TOPSIS ranking of candidate models with entropy or learned criterion
//! weights.

mod tables;
mod weightnet;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geogrid::{Season, ZoneScope};
use crate::metrics::{Metric, MetricReport};
use crate::tensor::TensorError;

pub use tables::{
    rank_all, top_k, write_heatmap_csv, write_ranking_csv, ContextRanking, ContextWeights, Heatmap, RankedTable, TopRow, WeightSource,
};
pub use weightnet::{synthetic_contexts, train_weightnet, EpochRecord, Phase, WeightNet, WeightNetConfig};

#[derive(Debug, Error)]
pub enum RankError {
    #[error("need at least 2 models to rank, got {0}")]
    TooFewModels(usize),
    #[error("no usable criteria remain")]
    NoCriteria,
    #[error("weight vector invalid: {0}")]
    Weights(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = RankError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Benefit,
    Cost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub metric: Metric,
    pub orientation: Orientation,
}

impl Criterion {
    /// Fixed orientation per metric. Bias enters as |bias|, so it is a cost.
    pub fn of(metric: Metric) -> Self {
        let orientation = match metric {
            Metric::R | Metric::R2 | Metric::Nse | Metric::Kge | Metric::PdfOverlap => Orientation::Benefit,
            Metric::Bias | Metric::Rmse | Metric::TxxErr | Metric::TnnErr | Metric::SdDiff => Orientation::Cost,
        };
        Self { metric, orientation }
    }

    /// Raw matrix entry for this criterion.
    pub fn value(&self, report: &MetricReport) -> Option<f64> {
        let v = report.get(self.metric)?;
        Some(if self.metric == Metric::Bias { v.abs() } else { v })
    }
}

/// Bias, RMSE, r, r², NSE, KGE, PDF overlap, TXx and TNn errors.
pub fn default_criteria() -> Vec<Criterion> {
    [
        Metric::Bias,
        Metric::Rmse,
        Metric::R,
        Metric::R2,
        Metric::Nse,
        Metric::Kge,
        Metric::PdfOverlap,
        Metric::TxxErr,
        Metric::TnnErr,
    ]
    .into_iter()
    .map(Criterion::of)
    .collect()
}

/// A (zone, season) ranking context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Context {
    pub zone: ZoneScope,
    pub season: Season,
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.zone, self.season)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionMatrix {
    pub models: Vec<String>,
    pub criteria: Vec<Criterion>,
    /// Row-major `models x criteria`.
    pub values: Vec<f64>,
    /// Criteria removed because no model had a valid value.
    pub dropped: Vec<Criterion>,
    /// Number of entries filled by worst-value imputation.
    pub imputed: usize,
}

impl DecisionMatrix {
    pub fn new(models: Vec<String>, criteria: Vec<Criterion>, values: Vec<f64>) -> Result<Self> {
        if models.len() < 2 {
            return Err(RankError::TooFewModels(models.len()));
        }
        if criteria.is_empty() {
            return Err(RankError::NoCriteria);
        }
        if values.len() != models.len() * criteria.len() {
            return Err(RankError::Shape(format!("{} values for {}x{}", values.len(), models.len(), criteria.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RankError::Invalid(format!("non-finite entry at ({}, {})", i / criteria.len(), i % criteria.len())));
        }
        Ok(Self { models, criteria, values, dropped: Vec::new(), imputed: 0 })
    }

    pub fn rows(&self) -> usize {
        self.models.len()
    }

    pub fn cols(&self) -> usize {
        self.criteria.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.get(i, j)).collect()
    }
}

/// Build the decision matrix for one context. Missing entries take the
/// column's worst valid value; columns with no valid value are dropped.
pub fn assemble_matrix(reports: &[(String, MetricReport)], criteria: &[Criterion]) -> Result<DecisionMatrix> {
    if reports.len() < 2 {
        return Err(RankError::TooFewModels(reports.len()));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut columns = Vec::new();
    let mut imputed = 0;
    for c in criteria {
        let raw: Vec<Option<f64>> = reports.iter().map(|(_, r)| c.value(r)).collect();
        let valid = raw.iter().flatten().copied();
        let worst = match c.orientation {
            Orientation::Cost => valid.fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v)))),
            Orientation::Benefit => valid.fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.min(v)))),
        };
        match worst {
            None => {
                log::debug!("criterion {} has no valid value in any model; dropped", c.metric);
                dropped.push(*c);
            }
            Some(w) => {
                imputed += raw.iter().filter(|v| v.is_none()).count();
                columns.push(raw.into_iter().map(|v| v.unwrap_or(w)).collect::<Vec<_>>());
                kept.push(*c);
            }
        }
    }
    let m = reports.len();
    let values = (0..m).flat_map(|i| columns.iter().map(move |col| col[i])).collect();
    let mut dm = DecisionMatrix::new(reports.iter().map(|(n, _)| n.clone()).collect(), kept, values)?;
    dm.dropped = dropped;
    dm.imputed = imputed;
    Ok(dm)
}

/// Vector normalization per column: `N_ij = C_ij / sqrt(sum_i C_ij^2)`.
/// A zero column stays zero.
pub fn normalize(c: &DecisionMatrix) -> Vec<f64> {
    let (m, n) = (c.rows(), c.cols());
    let mut out = vec![0.0; m * n];
    for j in 0..n {
        let norm = (0..m).map(|i| c.get(i, j) * c.get(i, j)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..m {
                out[i * n + j] = c.get(i, j) / norm;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(RankError::Weights("empty".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RankError::Weights(format!("negative or non-finite entry in {w:?}")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(RankError::Weights(format!("sum {s} != 1")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub cc: f64,
    pub d_plus: f64,
    pub d_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    /// Scores in input row order.
    pub scores: Vec<ModelScore>,
    /// Row indices sorted by CC descending, ties by model name.
    pub order: Vec<usize>,
}

impl RankingResult {
    pub fn ranked(&self) -> impl Iterator<Item = (usize, &ModelScore)> {
        self.order.iter().enumerate().map(|(r, &i)| (r + 1, &self.scores[i]))
    }

    pub fn winner(&self) -> &ModelScore {
        &self.scores[self.order[0]]
    }
}

/// Closeness coefficients of every row of the normalized matrix `n`.
pub fn topsis_score(models: &[String], n: &[f64], w: &WeightVector, criteria: &[Criterion]) -> Result<RankingResult> {
    let k = criteria.len();
    if w.len() != k || k == 0 || n.len() != models.len() * k {
        return Err(RankError::Shape(format!(
            "{} weights, {} criteria, {} values for {} models",
            w.len(),
            k,
            n.len(),
            models.len()
        )));
    }
    let m = models.len();
    let weighted: Vec<f64> = n.iter().enumerate().map(|(idx, v)| w.as_slice()[idx % k] * v).collect();
    let mut best = vec![0.0; k];
    let mut worst = vec![0.0; k];
    for j in 0..k {
        let col = (0..m).map(|i| weighted[i * k + j]);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (best[j], worst[j]) = match criteria[j].orientation {
            Orientation::Benefit => (hi, lo),
            Orientation::Cost => (lo, hi),
        };
    }
    let scores: Vec<ModelScore> = (0..m)
        .map(|i| {
            let row = &weighted[i * k..(i + 1) * k];
            let dp = row.iter().zip(&best).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let dm = row.iter().zip(&worst).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let cc = if dp + dm == 0.0 { 0.5 } else { dm / (dp + dm) };
            ModelScore { model: models[i].clone(), cc, d_plus: dp, d_minus: dm }
        })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].cc.total_cmp(&scores[a].cc).then_with(|| scores[a].model.cmp(&scores[b].model)));
    Ok(RankingResult { scores, order })
}

/// Column rescaled to a probability vector: min-max to [0, 1], then divided by
/// its sum. Constant columns map to the uniform vector.
fn column_probabilities(col: &[f64]) -> Vec<f64> {
    let m = col.len();
    let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo <= 0.0 {
        return vec![1.0 / m as f64; m];
    }
    let scaled: Vec<f64> = col.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let s: f64 = scaled.iter().sum();
    scaled.iter().map(|v| v / s).collect()
}

/// Normalized Shannon entropy of a column, in [0, 1].
pub fn column_entropy(col: &[f64]) -> f64 {
    let m = col.len();
    if m < 2 || col.iter().all(|&v| v == col[0]) {
        return 1.0;
    }
    let h: f64 = column_probabilities(col).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
    h / (m as f64).ln()
}

/// Entropy-method criterion weights: `w_j ∝ 1 - e_j`.
pub fn entropy_target_weights(c: &DecisionMatrix) -> WeightVector {
    let d: Vec<f64> = (0..c.cols()).map(|j| (1.0 - column_entropy(&c.column(j))).max(0.0)).collect();
    let s: f64 = d.iter().sum();
    if s <= 0.0 {
        return WeightVector::uniform(c.cols());
    }
    WeightVector(d.iter().map(|v| v / s).collect())
}

pub const FEATURES_PER_CRITERION: usize = 5;

/// Per criterion: mean, sd, min, max of the vector-normalized column, then its
/// entropy. Length is `5 * criteria` regardless of the number of models.
pub fn featurize(c: &DecisionMatrix) -> Vec<f64> {
    let n = normalize(c);
    let (m, k) = (c.rows(), c.cols());
    let mut out = Vec::with_capacity(FEATURES_PER_CRITERION * k);
    for j in 0..k {
        let col: Vec<f64> = (0..m).map(|i| n[i * k + j]).collect();
        let mean = col.iter().sum::<f64>() / m as f64;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64).sqrt();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend([mean, sd, lo, hi, column_entropy(&col)]);
    }
    out
}
