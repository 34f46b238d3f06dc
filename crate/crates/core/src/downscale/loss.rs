use crate::tensor::{Graph, Result, Tensor, Var};

/// Per-cell weights `1 + alpha * max(0, |z| - 1)`, where `z` standardizes the
/// target against its own batch mean and sd. A constant target gives all ones.
pub fn imbalance_weights(target: &Tensor, alpha: f64) -> Tensor {
    let d = target.data();
    let n = d.len().max(1) as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let w = d
        .iter()
        .map(|&v| if sd > 0.0 { 1.0 + alpha * (((v - mean) / sd).abs() - 1.0).max(0.0) } else { 1.0 })
        .collect();
    Tensor::new(target.shape().to_vec(), w).expect("same shape")
}

pub fn imbalance_weighted_mse(g: &mut Graph, pred: Var, target: &Tensor, alpha: f64) -> Result<Var> {
    let w = imbalance_weights(target, alpha);
    g.weighted_mse(pred, target, Some(&w))
}
