//! Rank three models on a hand-written decision matrix with entropy weights.

use climrank::metrics::Metric;
use climrank::ranking::{entropy_target_weights, normalize, topsis_score, Criterion, DecisionMatrix, WeightVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let criteria: Vec<Criterion> = [Metric::Rmse, Metric::Kge, Metric::PdfOverlap].into_iter().map(Criterion::of).collect();
    let models: Vec<String> = ["alpha", "beta", "gamma"].map(String::from).into();
    #[rustfmt::skip]
    let values = vec![
        1.2, 0.81, 0.90,
        0.9, 0.74, 0.93,
        2.1, 0.55, 0.78,
    ];
    let c = DecisionMatrix::new(models.clone(), criteria.clone(), values)?;
    let n = normalize(&c);

    for (label, w) in [("uniform", WeightVector::uniform(criteria.len())), ("entropy", entropy_target_weights(&c))] {
        let result = topsis_score(&models, &n, &w, &criteria)?;
        println!("{label} weights {:?}", w.as_slice().iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());
        for (rank, s) in result.ranked() {
            println!("  {rank}. {:<6} cc {:.4}  d+ {:.4}  d- {:.4}", s.model, s.cc, s.d_plus, s.d_minus);
        }
    }
    Ok(())
}
