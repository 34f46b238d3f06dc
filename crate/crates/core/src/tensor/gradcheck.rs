//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Coordinates checked per tensor; larger tensors are sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-4, max_coords: 48, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Compare the analytic gradient of the scalar built by `f` against central
/// differences, for every trainable entry of `store`.
pub fn grad_check<F>(store: &ParamStore, f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        if g.value(out).numel() != 1 {
            return Err(TensorError::Invalid("grad_check needs a scalar function".into()));
        }
        Ok(g.value(out).item())
    };
    let analytic = {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.backward(out)?.params(store)
    };
    let mut rng = SplitMix64::new(cfg.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            (0..cfg.max_coords).map(|_| rng.below(n as u64) as usize).collect()
        };
        for k in coords {
            let x0 = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = x0 + cfg.eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[k] = x0 - cfg.eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[k] = x0;
            let num = (fp - fm) / (2.0 * cfg.eps);
            let ana = analytic[id.index()].as_ref().map_or(0.0, |g| g[k]);
            let err = (ana - num).abs() / ana.abs().max(num.abs()).max(cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), k, ana, num));
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] for a function of plain input tensors.
pub fn grad_check_inputs<F>(inputs: &[Tensor], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.iter().enumerate().map(|(i, t)| store.add(format!("input{i}"), t.clone())).collect();
    grad_check(
        &store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &vars)
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;
    use crate::tensor::{BackwardFn, Padding};

    fn rand(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    const TOL: f64 = 1e-4;

    fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> GradCheckReport {
        let r = grad_check_inputs(inputs, f, GradCheckConfig::default()).unwrap();
        assert!(r.passes(TOL), "{r:?}");
        r
    }

    /// Random projection so every output coordinate reaches the scalar.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = SplitMix64::new(seed);
        let w = g.constant(rand(g.shape(y), &mut rng))?;
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = SplitMix64::new(1);
        let r = grad_check_inputs(
            &[rand(&[3, 4], &mut rng)],
            |g, v| {
                let s = g.scale(v[0], 2.5)?;
                g.sum(s)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = SplitMix64::new(2);
        let (a, b) = (rand(&[2, 5], &mut rng), rand(&[2, 5], &mut rng));
        check(&[a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            project(g, m, 3)
        });
        check(&[a.clone()], |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, 4)
        });
        check(&[a.clone()], |g, v| {
            let y = g.tanh(v[0])?;
            project(g, y, 5)
        });
        check(&[a], |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, 6)
        });
    }

    #[test]
    fn matmul_and_bias() {
        let mut rng = SplitMix64::new(7);
        for (m, k, n) in [(1, 1, 1), (3, 4, 2), (5, 2, 6)] {
            let ins = [rand(&[m, k], &mut rng), rand(&[k, n], &mut rng), rand(&[n], &mut rng), rand(&[n, k], &mut rng)];
            check(&ins, |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                let z = g.matmul_nt(v[0], v[3])?;
                let s = g.add(y, z)?;
                project(g, s, 8)
            });
        }
    }

    #[test]
    fn softmax_and_mse() {
        let mut rng = SplitMix64::new(9);
        let target = Tensor::from_fn(&[3, 4], |i| [0.1, 0.2, 0.3, 0.4][i % 4]);
        let w = Tensor::from_fn(&[3, 4], |i| 1.0 + (i % 3) as f64);
        check(&[rand(&[3, 4], &mut rng)], |g, v| {
            let s = g.softmax(v[0])?;
            g.weighted_mse(s, &target, Some(&w))
        });
    }

    #[test]
    fn composed_net() {
        let mut rng = SplitMix64::new(10);
        let ins = [
            rand(&[4, 5], &mut rng),
            rand(&[5, 6], &mut rng),
            rand(&[6], &mut rng),
            rand(&[6, 3], &mut rng),
            rand(&[3], &mut rng),
        ];
        let target = Tensor::from_fn(&[4, 3], |i| (i % 3) as f64 / 3.0);
        check(&ins, |g, v| {
            let h = g.dense(v[0], v[1], v[2])?;
            let h = g.relu(h)?;
            let o = g.dense(h, v[3], v[4])?;
            let o = g.softmax(o)?;
            g.mse(o, &target)
        });
    }

    #[test]
    fn conv_ops() {
        let mut rng = SplitMix64::new(11);
        for (stride, pad) in [(1, Padding::Same), (1, Padding::Valid), (2, Padding::Explicit(1))] {
            let ins = [rand(&[2, 3, 5, 6], &mut rng), rand(&[4, 3, 3, 3], &mut rng), rand(&[4], &mut rng)];
            check(&ins, |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                let y = g.add_channel_bias(y, v[2])?;
                project(g, y, 12)
            });
        }
        for (k, stride) in [(2, 2), (3, 2), (1, 1)] {
            let ins = [rand(&[2, 3, 3, 4], &mut rng), rand(&[3, 2, k, k], &mut rng)];
            check(&ins, |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], stride)?;
                project(g, y, 13)
            });
        }
    }

    #[test]
    fn shape_ops() {
        let mut rng = SplitMix64::new(14);
        let x = rand(&[3, 4, 2], &mut rng);
        let idx = Rc::new(vec![5, 0, 0, 23, 7, 11]);
        check(&[x.clone(), rand(&[3, 2, 2], &mut rng)], |g, v| {
            let a = g.narrow(v[0], 1, 1, 2)?;
            let c = g.concat(&[a, v[1]], 1)?;
            let r = g.reshape(c, &[6, 4])?;
            let y = g.gather(v[0], idx.clone(), &[2, 3])?;
            let s1 = project(g, r, 15)?;
            let s2 = project(g, y, 16)?;
            let m = g.mean_of(&[s1, s2])?;
            let mm = g.mean(m)?;
            g.scale(mm, 1.5)
        });
    }

    #[test]
    fn norm_ops() {
        let mut rng = SplitMix64::new(17);
        check(&[rand(&[3, 6], &mut rng), rand(&[6], &mut rng), rand(&[6], &mut rng)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 18)
        });
        check(&[rand(&[3, 2, 2, 3], &mut rng), rand(&[2], &mut rng), rand(&[2], &mut rng)], |g, v| {
            let (y, _, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            project(g, y, 19)
        });
        let (rm, rv) = (vec![0.1, -0.2], vec![0.5, 2.0]);
        check(&[rand(&[3, 2, 2, 3], &mut rng), rand(&[2], &mut rng), rand(&[2], &mut rng)], |g, v| {
            let (y, _, _) = g.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5)?;
            project(g, y, 20)
        });
    }

    #[test]
    fn wrong_backward_is_detected() {
        // f(x) = sum(x^2) with a backward rule that forgets the factor 2.
        let bad: BackwardFn = Rc::new(|ins, _, g| vec![ins[0].data().iter().map(|x| g[0] * x).collect()]);
        let mut rng = SplitMix64::new(21);
        let r = grad_check_inputs(
            &[rand(&[4], &mut rng)],
            |g, v| {
                let val: f64 = g.value(v[0]).data().iter().map(|x| x * x).sum();
                g.custom(&[v[0]], Tensor::scalar(val), bad.clone())
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_err > 1e-2, "{r:?}");
    }
}
