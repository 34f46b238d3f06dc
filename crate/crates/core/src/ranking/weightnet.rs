use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    default_criteria, entropy_target_weights, featurize, Criterion, DecisionMatrix, RankError, Result, WeightVector,
    FEATURES_PER_CRITERION,
};
use crate::metrics::Metric;
use crate::rng::SplitMix64;
use crate::tensor::nn::{Ctx, Dense};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, Optimizer, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightNetConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Leading epochs trained with plain SGD before switching to Adam.
    pub sgd_epochs: usize,
    pub hidden: [usize; 2],
    pub seed: u64,
}

impl Default for WeightNetConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch: 32, epochs: 50, sgd_epochs: 5, hidden: [64, 32], seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-sample training MSE over the epoch.
    pub loss: f64,
}

/// `features -> 64 ReLU -> 32 ReLU -> n_criteria softmax`, with inputs
/// standardized by statistics stored alongside the weights.
#[derive(Debug, Clone)]
pub struct WeightNet {
    pub store: ParamStore,
    layers: [Dense; 3],
    feat_mean: ParamId,
    feat_sd: ParamId,
    n_criteria: usize,
    seed: u64,
}

impl WeightNet {
    pub fn new(n_criteria: usize, hidden: [usize; 2], seed: u64) -> Self {
        let nf = FEATURES_PER_CRITERION * n_criteria;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::stream(seed, 0x7765_6967_6874);
        let layers = [
            Dense::new(&mut store, "fc1", nf, hidden[0], &mut rng),
            Dense::new(&mut store, "fc2", hidden[0], hidden[1], &mut rng),
            Dense::new(&mut store, "fc3", hidden[1], n_criteria, &mut rng),
        ];
        let feat_mean = store.add_buffer("feat_mean", Tensor::zeros(&[nf]));
        let feat_sd = store.add_buffer("feat_sd", Tensor::full(&[nf], 1.0));
        Self { store, layers, feat_mean, feat_sd, n_criteria, seed }
    }

    pub fn n_criteria(&self) -> usize {
        self.n_criteria
    }

    pub fn n_features(&self) -> usize {
        FEATURES_PER_CRITERION * self.n_criteria
    }

    fn standardize(&self, rows: &[&[f64]]) -> Tensor {
        let (mu, sd) = (self.store.get(self.feat_mean).data(), self.store.get(self.feat_sd).data());
        let nf = self.n_features();
        let data = rows.iter().flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j])).collect();
        Tensor::new(vec![rows.len(), nf], data).expect("feature rows have n_features entries")
    }

    fn forward(&self, cx: &mut Ctx, x: Tensor) -> crate::tensor::Result<crate::tensor::Var> {
        let mut h = cx.g.constant(x)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h)?;
            h = if i < 2 { cx.g.relu(h)? } else { cx.g.softmax(h)? };
        }
        Ok(h)
    }

    /// Weights for a raw feature vector.
    pub fn predict_features(&self, features: &[f64]) -> Result<WeightVector> {
        if features.len() != self.n_features() {
            return Err(RankError::Shape(format!("{} features, net expects {}", features.len(), self.n_features())));
        }
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, false);
        let out = self.forward(&mut cx, self.standardize(&[features]))?;
        let w = g.value(out).data().to_vec();
        // Softmax output sums to 1 up to rounding; renormalize to keep the
        // WeightVector check tight.
        let s: f64 = w.iter().sum();
        WeightVector::new(w.iter().map(|v| v / s).collect())
    }

    pub fn predict(&self, c: &DecisionMatrix) -> Result<WeightVector> {
        self.predict_features(&featurize(c))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let extra = serde_json::json!({ "kind": "weightnet", "n_criteria": self.n_criteria });
        Ok(save_checkpoint(dir, &self.store, self.seed, 0, extra)?)
    }

    /// Load a net saved by [`WeightNet::save`]; `hidden` must match.
    pub fn load(dir: &Path, hidden: [usize; 2]) -> Result<Self> {
        let probe = std::fs::read(dir.join("manifest.json")).map_err(|e| RankError::Invalid(format!("{}: {e}", dir.display())))?;
        let manifest: serde_json::Value = serde_json::from_slice(&probe).map_err(|e| RankError::Invalid(e.to_string()))?;
        let n = manifest["extra"]["n_criteria"]
            .as_u64()
            .ok_or_else(|| RankError::Invalid("checkpoint is not a weight network".into()))? as usize;
        let seed = manifest["seed"].as_u64().unwrap_or(0);
        let mut net = Self::new(n, hidden, seed);
        load_checkpoint(dir, &mut net.store)?;
        Ok(net)
    }
}

/// Train against entropy-method targets. Returns the net and one record per epoch.
pub fn train_weightnet(contexts: &[DecisionMatrix], cfg: &WeightNetConfig) -> Result<(WeightNet, Vec<EpochRecord>)> {
    let first = contexts.first().ok_or_else(|| RankError::Invalid("no training contexts".into()))?;
    let n = first.cols();
    if let Some(bad) = contexts.iter().find(|c| c.cols() != n) {
        return Err(RankError::Shape(format!("context with {} criteria among {n}-criterion contexts", bad.cols())));
    }
    if cfg.batch == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(RankError::Invalid("batch, epochs and lr must be positive".into()));
    }
    let feats: Vec<Vec<f64>> = contexts.iter().map(featurize).collect();
    let targets: Vec<Vec<f64>> = contexts.iter().map(|c| entropy_target_weights(c).as_slice().to_vec()).collect();

    let mut net = WeightNet::new(n, cfg.hidden, cfg.seed);
    let nf = net.n_features();
    let count = feats.len() as f64;
    let mu: Vec<f64> = (0..nf).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / count).collect();
    let sd: Vec<f64> = (0..nf)
        .map(|j| {
            let s = (feats.iter().map(|f| (f[j] - mu[j]).powi(2)).sum::<f64>() / count).sqrt();
            if s > 1e-12 { s } else { 1.0 }
        })
        .collect();
    net.store.set(net.feat_mean, Tensor::from_vec(mu))?;
    net.store.set(net.feat_sd, Tensor::from_vec(sd))?;

    let mut rng = SplitMix64::stream(cfg.seed, 0x73_6875_6666);
    let mut sgd = Optimizer::sgd(cfg.lr);
    let mut adam = Optimizer::adam(cfg.lr);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let phase = if epoch <= cfg.sgd_epochs { Phase::Sgd } else { Phase::Adam };
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| feats[i].as_slice()).collect();
            let x = net.standardize(&rows);
            let y = Tensor::new(vec![chunk.len(), n], chunk.iter().flat_map(|&i| targets[i].iter().copied()).collect())?;
            let mut g = Graph::new();
            let grads = {
                let mut cx = Ctx::new(&mut g, &net.store, true);
                let step = net.forward(&mut cx, x).and_then(|p| cx.g.mse(p, &y));
                let loss = step.map_err(|e| RankError::Diverged { epoch, detail: e.to_string() })?;
                total += g.value(loss).item() * chunk.len() as f64;
                g.backward(loss)?.params(&net.store)
            };
            let opt = if phase == Phase::Sgd { &mut sgd } else { &mut adam };
            opt.step(&mut net.store, &grads).map_err(|e| RankError::Diverged { epoch, detail: e.to_string() })?;
        }
        let loss = total / count;
        if !loss.is_finite() {
            return Err(RankError::Diverged { epoch, detail: format!("loss {loss}") });
        }
        log::debug!("weightnet epoch {epoch} ({phase:?}) loss {loss:.3e}");
        log.push(EpochRecord { epoch, phase, loss });
    }
    Ok((net, log))
}

/// Random decision matrices with varied column shapes, for training and
/// tests. Criteria are the default set truncated or padded from the full
/// metric list to `n_criteria`.
pub fn synthetic_contexts(count: usize, n_criteria: usize, seed: u64) -> Vec<DecisionMatrix> {
    let mut criteria: Vec<Criterion> = default_criteria();
    criteria.extend(Metric::ALL.iter().filter(|m| !criteria.iter().any(|c| c.metric == **m)).map(|&m| Criterion::of(m)).collect::<Vec<_>>());
    criteria.truncate(n_criteria);
    let mut rng = SplitMix64::stream(seed, 0x6374_78);
    (0..count)
        .map(|_| {
            let m = 4 + rng.below(9) as usize;
            let cols: Vec<Vec<f64>> = criteria
                .iter()
                .map(|_| {
                    // Skew controls how concentrated the column is after min-max.
                    let skew = (rng.uniform(-1.6, 1.6)).exp();
                    let (base, spread) = (rng.uniform(0.1, 2.0), rng.uniform(0.05, 1.0));
                    (0..m).map(|_| base + spread * rng.next_f64().powf(skew)).collect()
                })
                .collect();
            let values = (0..m).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
            let models = (0..m).map(|i| format!("gcm{i:02}")).collect();
            DecisionMatrix::new(models, criteria.clone(), values).expect("synthetic matrix is valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_weight_vectors() {
        let net = WeightNet::new(9, [64, 32], 3);
        for c in synthetic_contexts(20, 9, 1) {
            let w = net.predict(&c).unwrap();
            assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ctx = synthetic_contexts(40, 4, 2);
        let cfg = WeightNetConfig { epochs: 30, ..Default::default() };
        let (a, la) = train_weightnet(&ctx, &cfg).unwrap();
        let (b, lb) = train_weightnet(&ctx, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.store, b.store);
        assert!(la.last().unwrap().loss < la[0].loss);
        assert_eq!(la[4].phase, Phase::Sgd);
        assert_eq!(la[5].phase, Phase::Adam);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = synthetic_contexts(8, 3, 4);
        let (net, _) = train_weightnet(&ctx, &WeightNetConfig { epochs: 2, ..Default::default() }).unwrap();
        net.save(dir.path()).unwrap();
        let back = WeightNet::load(dir.path(), [64, 32]).unwrap();
        assert_eq!(back.store, net.store);
        assert_eq!(back.predict(&ctx[0]).unwrap(), net.predict(&ctx[0]).unwrap());
    }
}
