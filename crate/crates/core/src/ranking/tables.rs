use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{
    assemble_matrix, entropy_target_weights, normalize, topsis_score, Context, Criterion, DecisionMatrix, RankError,
    RankingResult, Result, WeightNet, WeightVector,
};
use crate::metrics::{Metric, MetricReport, ReportRow};
use crate::par::par_map;

#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    Uniform,
    Entropy,
    /// Learned weights; the net must have been trained on the same criteria list.
    Net(&'a WeightNet),
}

impl WeightSource<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            WeightSource::Uniform => "uniform",
            WeightSource::Entropy => "entropy",
            WeightSource::Net(_) => "weightnet",
        }
    }

    fn weights(&self, dm: &DecisionMatrix, criteria: &[Criterion]) -> Result<WeightVector> {
        match self {
            WeightSource::Uniform => Ok(WeightVector::uniform(dm.cols())),
            WeightSource::Entropy => Ok(entropy_target_weights(dm)),
            WeightSource::Net(net) => {
                if net.n_criteria() != criteria.len() {
                    return Err(RankError::Shape(format!(
                        "weight network has {} outputs, ranking uses {} criteria",
                        net.n_criteria(),
                        criteria.len()
                    )));
                }
                if dm.dropped.is_empty() {
                    return net.predict(dm);
                }
                // Dropped criteria enter the net as inert zero columns; their
                // weights are removed afterwards.
                let m = dm.rows();
                let mut values = Vec::with_capacity(m * criteria.len());
                for i in 0..m {
                    for c in criteria {
                        values.push(dm.criteria.iter().position(|k| k == c).map_or(0.0, |j| dm.get(i, j)));
                    }
                }
                let full = DecisionMatrix::new(dm.models.clone(), criteria.to_vec(), values)?;
                let w = net.predict(&full)?;
                let kept: Vec<f64> = criteria
                    .iter()
                    .zip(w.as_slice())
                    .filter(|(c, _)| dm.criteria.contains(c))
                    .map(|(_, &v)| v)
                    .collect();
                let s: f64 = kept.iter().sum();
                if s > 0.0 {
                    WeightVector::new(kept.iter().map(|v| v / s).collect())
                } else {
                    Ok(WeightVector::uniform(kept.len()))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWeights {
    pub context: Context,
    pub criteria: Vec<Metric>,
    pub weights: Vec<f64>,
    pub source: String,
    pub dropped: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextRanking {
    pub context: Context,
    pub matrix: DecisionMatrix,
    pub result: RankingResult,
    pub reports: Vec<(String, MetricReport)>,
    pub weights: ContextWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedTable {
    pub contexts: Vec<ContextRanking>,
}

/// Rank every (zone, season) context present in `rows`. Contexts are sorted;
/// models within a context keep their input order.
pub fn rank_all(rows: &[ReportRow], criteria: &[Criterion], source: WeightSource<'_>, jobs: usize) -> Result<RankedTable> {
    let mut grouped: BTreeMap<Context, Vec<(String, MetricReport)>> = BTreeMap::new();
    for r in rows {
        grouped.entry(Context { zone: r.zone, season: r.season }).or_default().push((r.model.clone(), r.report.clone()));
    }
    let groups: Vec<(Context, Vec<(String, MetricReport)>)> = grouped.into_iter().collect();
    let ranked = par_map(&groups, jobs, |(ctx, reports)| -> Result<ContextRanking> {
        let matrix = assemble_matrix(reports, criteria).map_err(|e| RankError::Invalid(format!("{ctx}: {e}")))?;
        let w = source.weights(&matrix, criteria)?;
        let result = topsis_score(&matrix.models, &normalize(&matrix), &w, &matrix.criteria)?;
        let weights = ContextWeights {
            context: *ctx,
            criteria: matrix.criteria.iter().map(|c| c.metric).collect(),
            weights: w.as_slice().to_vec(),
            source: source.label().to_string(),
            dropped: matrix.dropped.iter().map(|c| c.metric).collect(),
        };
        Ok(ContextRanking { context: *ctx, matrix, result, reports: reports.clone(), weights })
    });
    Ok(RankedTable { contexts: ranked.into_iter().collect::<Result<_>>()? })
}

/// Models x contexts matrix of closeness coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub models: Vec<String>,
    pub contexts: Vec<Context>,
    /// Row-major `models x contexts`; `None` where a model was absent.
    pub cc: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn get(&self, model: usize, context: usize) -> Option<f64> {
        self.cc[model * self.contexts.len() + context]
    }
}

impl RankedTable {
    pub fn heatmap(&self) -> Heatmap {
        let models: Vec<String> = {
            let mut seen = BTreeSet::new();
            let mut v = Vec::new();
            for c in &self.contexts {
                for s in &c.result.scores {
                    if seen.insert(s.model.clone()) {
                        v.push(s.model.clone());
                    }
                }
            }
            v
        };
        let contexts: Vec<Context> = self.contexts.iter().map(|c| c.context).collect();
        let mut cc = vec![None; models.len() * contexts.len()];
        for (j, c) in self.contexts.iter().enumerate() {
            for s in &c.result.scores {
                let i = models.iter().position(|m| *m == s.model).expect("model collected above");
                cc[i * contexts.len() + j] = Some(s.cc);
            }
        }
        Heatmap { models, contexts, cc }
    }

    pub fn get(&self, context: Context) -> Option<&ContextRanking> {
        self.contexts.iter().find(|c| c.context == context)
    }

    pub fn weights(&self) -> Vec<&ContextWeights> {
        self.contexts.iter().map(|c| &c.weights).collect()
    }
}

/// Top-k row: closeness score with the model's headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopRow {
    pub context: Context,
    pub rank: usize,
    pub model: String,
    pub score: f64,
    pub bias: f64,
    pub rmse: f64,
    pub kge: Option<f64>,
    pub nse: Option<f64>,
    pub pdf_overlap: f64,
}

pub fn top_k(table: &RankedTable, k: usize) -> Vec<TopRow> {
    let mut out = Vec::new();
    for c in &table.contexts {
        for (rank, s) in c.result.ranked().take(k) {
            let report = &c.reports.iter().find(|(m, _)| *m == s.model).expect("ranked model has a report").1;
            out.push(TopRow {
                context: c.context,
                rank,
                model: s.model.clone(),
                score: s.cc,
                bias: report.bias,
                rmse: report.rmse,
                kge: report.kge,
                nse: report.nse,
                pdf_overlap: report.pdf_overlap,
            });
        }
    }
    out
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

/// context, zone, season, model, cc, d_plus, d_minus, rank, then the raw metrics.
pub fn write_ranking_csv<W: Write>(table: &RankedTable, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> =
        ["context", "zone", "season", "model", "cc", "d_plus", "d_minus", "rank"].iter().map(|s| s.to_string()).collect();
    header.extend(Metric::ALL.iter().map(|m| m.name().to_string()));
    w.write_record(&header)?;
    for c in &table.contexts {
        for (rank, s) in c.result.ranked() {
            let report = &c.reports.iter().find(|(m, _)| *m == s.model).expect("ranked model has a report").1;
            let mut rec = vec![
                c.context.to_string(),
                c.context.zone.to_string(),
                c.context.season.to_string(),
                s.model.clone(),
                num(Some(s.cc)),
                num(Some(s.d_plus)),
                num(Some(s.d_minus)),
                rank.to_string(),
            ];
            rec.extend(Metric::ALL.iter().map(|&m| num(report.get(m))));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_heatmap_csv<W: Write>(h: &Heatmap, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    header.extend(h.contexts.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for (i, m) in h.models.iter().enumerate() {
        let mut rec = vec![m.clone()];
        rec.extend((0..h.contexts.len()).map(|j| num(h.get(i, j))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{Season, Zone, ZoneScope};
    use crate::ranking::{default_criteria, synthetic_contexts, train_weightnet, WeightNetConfig};

    fn report(shift: f64, noise: f64) -> MetricReport {
        MetricReport {
            bias: shift,
            rmse: (shift * shift + noise * noise).sqrt(),
            r: Some(1.0 - noise / 10.0),
            r2: Some((1.0 - noise / 10.0).powi(2)),
            nse: Some(1.0 - noise / 5.0 - shift / 10.0),
            kge: Some(1.0 - noise / 4.0 - shift / 8.0),
            pdf_overlap: 1.0 - (noise + shift) / 10.0,
            txx_err: Some(shift + noise / 2.0),
            tnn_err: None,
            sd_diff: noise / 3.0,
            n: 100,
        }
    }

    fn rows() -> Vec<ReportRow> {
        let mut v = Vec::new();
        for zone in [ZoneScope::Single(Zone::Arid), ZoneScope::Overall] {
            for season in [Season::Djf, Season::Annual] {
                for (model, shift, noise) in [("noisy", 0.0, 3.0), ("biased", 2.0, 0.0), ("good", 0.0, 0.0)] {
                    v.push(ReportRow { model: model.into(), zone, season, report: report(shift, noise) });
                }
            }
        }
        v
    }

    #[test]
    fn good_model_wins_everywhere() {
        let t = rank_all(&rows(), &default_criteria(), WeightSource::Uniform, 2).unwrap();
        assert_eq!(t.contexts.len(), 4);
        for c in &t.contexts {
            assert_eq!(c.result.winner().model, "good");
            assert_eq!(c.weights.dropped, vec![Metric::TnnErr]);
        }
        let h = t.heatmap();
        assert_eq!(h.cc.len(), 3 * 4);
        assert!(h.cc.iter().all(|v| v.is_some_and(|x| (0.0..=1.0).contains(&x))));
        let top = top_k(&t, 5);
        assert_eq!(top.len(), 12);
        assert_eq!(top[0].model, "good");
    }

    #[test]
    fn schedule_does_not_change_output() {
        let a = rank_all(&rows(), &default_criteria(), WeightSource::Entropy, 1).unwrap();
        let b = rank_all(&rows(), &default_criteria(), WeightSource::Entropy, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn net_weights_skip_dropped_criteria() {
        let (net, _) = train_weightnet(&synthetic_contexts(10, 9, 0), &WeightNetConfig { epochs: 1, ..Default::default() }).unwrap();
        let t = rank_all(&rows(), &default_criteria(), WeightSource::Net(&net), 1).unwrap();
        for c in &t.contexts {
            assert_eq!(c.weights.weights.len(), 8);
            assert!((c.weights.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_exports() {
        let t = rank_all(&rows(), &default_criteria(), WeightSource::Uniform, 1).unwrap();
        let mut buf = Vec::new();
        write_ranking_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 12);
        assert!(text.lines().nth(1).unwrap().starts_with("Arid/DJF,Arid,DJF,good,"));
        let mut buf = Vec::new();
        write_heatmap_csv(&t.heatmap(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
