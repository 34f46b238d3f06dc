use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use super::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First-order optimizer over a [`ParamStore`]. Buffers are skipped.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters with no gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "optimizer step" });
        }
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(Some(g)) = grads.get(id.index()) else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            if p.len() != g.len() {
                return Err(TensorError::Invalid(format!("gradient length {} for parameter of {}", g.len(), p.len())));
            }
            match self.kind {
                OptimizerKind::Sgd => p.iter_mut().zip(g).for_each(|(w, d)| *w -= self.lr * d),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
                    if m.is_empty() {
                        *m = vec![0.0; p.len()];
                        *v = vec![0.0; p.len()];
                    }
                    let t = self.step as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for k in 0..p.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        p[k] -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
