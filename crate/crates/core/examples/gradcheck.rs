//! Finite-difference check of a small conv + dense network built on the tape.

use climrank::rng::SplitMix64;
use climrank::tensor::{grad_check, GradCheckConfig, Graph, Padding, ParamStore, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = SplitMix64::new(4);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.normal() * 0.5);
    let mut store = ParamStore::new();
    let k = store.add("conv.k", rand(&[3, 2, 3, 3]));
    let w = store.add("dense.w", rand(&[3 * 5 * 5, 4]));
    let b = store.add("dense.b", rand(&[4]));
    let x = rand(&[2, 2, 5, 5]);
    let target = rand(&[2, 4]);

    let report = grad_check(
        &store,
        |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(x.clone())?;
            let (k, w, b) = (g.param(s, k), g.param(s, w), g.param(s, b));
            let h = g.conv2d(x, k, 1, Padding::Same)?;
            let h = g.tanh(h)?;
            let h = g.reshape(h, &[2, 3 * 5 * 5])?;
            let y = g.dense(h, w, b)?;
            g.mse(y, &target)
        },
        GradCheckConfig::default(),
    )?;
    println!("checked {} coordinates, max relative error {:.2e}", report.checked, report.max_rel_err);
    if let Some((name, i, a, n)) = &report.worst {
        println!("worst: {name}[{i}] analytic {a:.6e} numeric {n:.6e}");
    }
    println!("{}", if report.passes(1e-4) { "ok" } else { "FAILED" });
    Ok(())
}
