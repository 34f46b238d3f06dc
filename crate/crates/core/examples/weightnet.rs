//! Train the weight network on synthetic decision matrices and compare its
//! output with entropy weights on an unseen matrix.

use climrank::ranking::{entropy_target_weights, synthetic_contexts, train_weightnet, WeightNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = synthetic_contexts(50, 9, 1);
    let cfg = WeightNetConfig { epochs: 200, seed: 1, ..WeightNetConfig::default() };
    let (net, log) = train_weightnet(&train, &cfg)?;
    for rec in log.iter().step_by(25).chain(log.last()) {
        println!("epoch {:>4} {:?} mse {:.3e}", rec.epoch, rec.phase, rec.loss);
    }

    let held_out = &synthetic_contexts(1, 9, 99)[0];
    let predicted = net.predict(held_out)?;
    let target = entropy_target_weights(held_out);
    println!("{:>10} {:>10} {:>10}", "criterion", "net", "entropy");
    for (j, c) in held_out.criteria.iter().enumerate() {
        println!("{:>10} {:>10.4} {:>10.4}", c.metric.name(), predicted.as_slice()[j], target.as_slice()[j]);
    }
    Ok(())
}
