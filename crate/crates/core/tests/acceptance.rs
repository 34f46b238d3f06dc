//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach the terminal; exits non-zero on failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::time::{Duration, Instant};

use climrank::downscale::{
    benchmark_pair, build_dataset, evaluate, random_batch, train, validation_mse, ArchConfig, ArchKind, CoordBounds, Model, Scaler, Split, TrainConfig,
};
use climrank::geogrid::{
    read_cube, regrid_bilinear, write_cube, AxisKind, Calendar, CubeMeta, DataCube, Date, GridAxis, Season, Variable, ZoneScope,
};
use climrank::metrics::{Metric, MetricReport, PooledSample};
use climrank::par::par_map;
use climrank::pipeline::{self, write_fixture, FixtureSpec, PipelineConfig, Stages};
use climrank::ranking::{
    normalize, synthetic_contexts, topsis_score, train_weightnet, Criterion, DecisionMatrix, Orientation, WeightNet, WeightNetConfig,
    WeightVector,
};
use climrank::rng::SplitMix64;
use climrank::tensor::nn::Ctx;
use climrank::tensor::{grad_check, grad_check_inputs, GradCheckConfig, Graph, Padding, Tensor, Var};

type Outcome = Result<String, String>;

const UNIT_BOUNDS: CoordBounds = CoordBounds { lat: [0.0, 1.0], lon: [0.0, 1.0] };

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn budget(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_s, format!("took {:.1}s, budget {limit_s}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- metrics

mod naive {
    pub fn mean(x: &[f64]) -> f64 {
        let mut s = 0.0;
        for v in x {
            s += v;
        }
        s / x.len() as f64
    }

    pub fn sd(x: &[f64]) -> f64 {
        let m = mean(x);
        let mut s = 0.0;
        for v in x {
            s += (v - m).powi(2);
        }
        (s / x.len() as f64).sqrt()
    }

    pub fn cov(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (mean(a), mean(b));
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - ma) * (b[i] - mb);
        }
        s / a.len() as f64
    }

    pub fn r(m: &[f64], o: &[f64]) -> f64 {
        cov(m, o) / (sd(m) * sd(o))
    }

    pub fn pdf_overlap(m: &[f64], o: &[f64], bins: usize) -> f64 {
        let all: Vec<f64> = m.iter().chain(o).copied().collect();
        let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let bin = |v: f64| {
            let mut b = 0;
            while b + 1 < bins && v >= lo + (b + 1) as f64 * width {
                b += 1;
            }
            b
        };
        let (mut p, mut q) = (vec![0.0; bins], vec![0.0; bins]);
        for &v in m {
            p[bin(v)] += 1.0 / m.len() as f64;
        }
        for &v in o {
            q[bin(v)] += 1.0 / o.len() as f64;
        }
        p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum()
    }

    /// All ten metrics in `Metric::ALL` order.
    pub fn all(m: &[f64], o: &[f64], bins: usize) -> [f64; 10] {
        let n = m.len() as f64;
        let r = r(m, o);
        let mut sse = 0.0;
        let mut sso = 0.0;
        for i in 0..m.len() {
            sse += (m[i] - o[i]).powi(2);
            sso += (o[i] - mean(o)).powi(2);
        }
        let beta = mean(m) / mean(o);
        let gamma = (sd(m) / mean(m)) / (sd(o) / mean(o));
        let max = |x: &[f64]| x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = |x: &[f64]| x.iter().cloned().fold(f64::INFINITY, f64::min);
        [
            mean(m) - mean(o),
            (sse / n).sqrt(),
            r,
            r * r,
            1.0 - sse / sso,
            1.0 - ((r - 1.0).powi(2) + (beta - 1.0).powi(2) + (gamma - 1.0).powi(2)).sqrt(),
            pdf_overlap(m, o, bins),
            (max(m) - max(o)).abs(),
            (min(m) - min(o)).abs(),
            (sd(m) - sd(o)).abs(),
        ]
    }
}

fn metric_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(2024);
    let bins = 100;
    let mut worst = (0.0f64, String::new());
    for case in 0..1000 {
        let n = 2 + rng.below(255) as usize;
        let offset = rng.uniform(-5.0, 30.0);
        let o: Vec<f64> = (0..n).map(|_| offset + 4.0 * rng.normal()).collect();
        let (a, b, noise) = (rng.uniform(-2.0, 2.0), rng.uniform(0.2, 1.5), rng.uniform(0.0, 3.0));
        let m: Vec<f64> = o.iter().map(|v| a + b * v + noise * rng.normal()).collect();
        let s = PooledSample::new(m.clone(), o.clone()).map_err(|e| e.to_string())?;
        let got = MetricReport::compute(&s, bins).map_err(|e| e.to_string())?;
        let want = naive::all(&m, &o, bins);
        for (k, metric) in Metric::ALL.into_iter().enumerate() {
            let g = got.get(metric).ok_or_else(|| format!("case {case}: {} missing", metric.name()))?;
            let err = (g - want[k]).abs() / want[k].abs().max(g.abs()).max(1.0);
            if err > worst.0 {
                worst = (err, format!("case {case} {}", metric.name()));
            }
        }
    }
    ensure(worst.0 <= 1e-9, format!("max relative error {:.2e} at {}", worst.0, worst.1))?;

    let o: Vec<f64> = (0..200).map(|i| 10.0 + (i as f64 * 0.37).sin() * 5.0).collect();
    let p = MetricReport::compute(&PooledSample::new(o.clone(), o).unwrap(), bins).unwrap();
    let perfect = [(p.bias, 0.0), (p.rmse, 0.0), (p.r.unwrap(), 1.0), (p.nse.unwrap(), 1.0), (p.kge.unwrap(), 1.0), (p.pdf_overlap, 1.0)];
    ensure(perfect.iter().all(|(g, w)| (g - w).abs() <= 1e-12), format!("perfect model gave {perfect:?}"))?;
    budget(t0.elapsed(), 10)?;
    Ok(format!("1000 samples, max rel err {:.1e}; perfect row exact", worst.0))
}

// ---------------------------------------------------------------- TOPSIS

fn cc(c: &DecisionMatrix, w: &WeightVector) -> Vec<f64> {
    topsis_score(&c.models, &normalize(c), w, &c.criteria).unwrap().scores.iter().map(|s| s.cc).collect()
}

fn labels(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("m{i}")).collect()
}

fn criteria(k: usize, rng: &mut SplitMix64) -> Vec<Criterion> {
    (0..k)
        .map(|j| Criterion {
            metric: Metric::ALL[j % Metric::ALL.len()],
            orientation: if rng.below(2) == 0 { Orientation::Benefit } else { Orientation::Cost },
        })
        .collect()
}

fn random_weights(k: usize, rng: &mut SplitMix64) -> WeightVector {
    let raw: Vec<f64> = (0..k).map(|_| rng.uniform(0.05, 1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let rest: f64 = w[1..].iter().sum();
    w[0] = 1.0 - rest;
    WeightVector::new(w).unwrap()
}

fn topsis_properties() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(7);
    let (b, c) = (Orientation::Benefit, Orientation::Cost);
    let crit = |o: &[Orientation]| -> Vec<Criterion> {
        o.iter().enumerate().map(|(j, &orientation)| Criterion { metric: Metric::ALL[j], orientation }).collect()
    };

    let hand = DecisionMatrix::new(labels(3), crit(&[b, c]), vec![3.0, 1.0, 2.0, 2.0, 1.0, 3.0]).unwrap();
    let got = cc(&hand, &WeightVector::uniform(2));
    ensure(got.iter().zip([1.0, 0.5, 0.0]).all(|(g, w)| (g - w).abs() < 1e-12), format!("hand 3x2 gave {got:?}"))?;

    let dom = DecisionMatrix::new(labels(2), crit(&[b, c, b]), vec![5.0, 1.0, 0.9, 4.0, 2.0, 0.1]).unwrap();
    ensure(cc(&dom, &WeightVector::uniform(3)) == vec![1.0, 0.0], "dominance endpoints")?;

    let same = DecisionMatrix::new(labels(3), crit(&[b, c]), vec![2.0, 3.0, 2.0, 3.0, 2.0, 3.0]).unwrap();
    ensure(cc(&same, &WeightVector::uniform(2)).iter().all(|&v| v == 0.5), "identical rows")?;

    for trial in 0..500 {
        let (m, k) = (2 + rng.below(7) as usize, 1 + rng.below(9) as usize);
        let cr = criteria(k, &mut rng);
        let vals: Vec<f64> = (0..m * k).map(|_| rng.uniform(0.1, 10.0)).collect();
        let dm = DecisionMatrix::new(labels(m), cr.clone(), vals.clone()).unwrap();
        let w = random_weights(k, &mut rng);
        let base = topsis_score(&dm.models, &normalize(&dm), &w, &cr).unwrap();
        ensure(base.scores.iter().all(|s| (0.0..=1.0).contains(&s.cc)), format!("trial {trial}: CC outside [0,1]"))?;

        // Power-of-two column scaling is exact in floating point, so N and CC
        // must come back bit-identical.
        let j = rng.below(k as u64) as usize;
        let factor = 2f64.powi(rng.below(12) as i32 - 4);
        let mut scaled = vals.clone();
        for i in 0..m {
            scaled[i * k + j] *= factor;
        }
        let ds = DecisionMatrix::new(labels(m), cr.clone(), scaled).unwrap();
        ensure(normalize(&ds) == normalize(&dm), format!("trial {trial}: N changed under x{factor}"))?;
        let again = topsis_score(&ds.models, &normalize(&ds), &w, &cr).unwrap();
        ensure(again == base, format!("trial {trial}: result changed under x{factor}"))?;

        // Arbitrary positive scale: ordering unchanged.
        let factor = rng.uniform(1e-3, 1e3);
        let mut scaled = vals.clone();
        for i in 0..m {
            scaled[i * k + j] *= factor;
        }
        let ds = DecisionMatrix::new(labels(m), cr.clone(), scaled).unwrap();
        let again = topsis_score(&ds.models, &normalize(&ds), &w, &cr).unwrap();
        let gaps_ok = base.order.windows(2).all(|p| base.scores[p[0]].cc - base.scores[p[1]].cc > 1e-9);
        ensure(!gaps_ok || again.order == base.order, format!("trial {trial}: order changed under x{factor}"))?;

        // Row permutation: each model keeps its score.
        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let pv: Vec<f64> = perm.iter().flat_map(|&i| vals[i * k..(i + 1) * k].to_vec()).collect();
        let pl: Vec<String> = perm.iter().map(|&i| dm.models[i].clone()).collect();
        let dp = DecisionMatrix::new(pl, cr.clone(), pv).unwrap();
        let permuted = topsis_score(&dp.models, &normalize(&dp), &w, &cr).unwrap();
        for (pos, &i) in perm.iter().enumerate() {
            let d = (permuted.scores[pos].cc - base.scores[i].cc).abs();
            ensure(d <= 1e-12, format!("trial {trial}: permutation moved a score by {d:.1e}"))?;
        }
        let names = |r: &climrank::ranking::RankingResult| r.ranked().map(|(_, s)| s.model.clone()).collect::<Vec<_>>();
        ensure(!gaps_ok || names(&permuted) == names(&base), format!("trial {trial}: permutation changed the ordering"))?;
    }
    budget(t0.elapsed(), 5)?;
    Ok("hand oracle, endpoints, ties, 500 random scale/permutation trials".into())
}

// ---------------------------------------------------------------- gradients

fn rand(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn project(g: &mut Graph, y: Var, seed: u64) -> climrank::tensor::Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let w = g.constant(rand(g.shape(y), &mut rng))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> climrank::tensor::Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mut r = SplitMix64::new(31);
    let target = Tensor::from_fn(&[3, 4], |i| 0.1 * (i % 4) as f64);
    let weights = Tensor::from_fn(&[3, 4], |i| 1.0 + (i % 3) as f64);
    let idx = Rc::new(vec![5, 0, 0, 23, 7, 11]);
    let (rm, rv) = (vec![0.1, -0.2], vec![0.5, 2.0]);
    vec![
        ("add/sub/mul", vec![rand(&[2, 5], &mut r), rand(&[2, 5], &mut r)], Box::new(|g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            project(g, m, 1)
        })),
        ("scale/mean_of", vec![rand(&[4], &mut r), rand(&[4], &mut r)], Box::new(|g, v| {
            let a = g.scale(v[0], -1.7)?;
            let m = g.mean_of(&[a, v[1]])?;
            project(g, m, 2)
        })),
        ("relu/sigmoid/tanh", vec![rand(&[3, 5], &mut r)], Box::new(|g, v| {
            let a = g.relu(v[0])?;
            let b = g.sigmoid(v[0])?;
            let c = g.tanh(v[0])?;
            let s = g.add(a, b)?;
            let s = g.add(s, c)?;
            project(g, s, 3)
        })),
        ("softmax/weighted_mse", vec![rand(&[3, 4], &mut r)], Box::new(move |g, v| {
            let s = g.softmax(v[0])?;
            g.weighted_mse(s, &target, Some(&weights))
        })),
        ("matmul/matmul_nt/dense", vec![rand(&[3, 4], &mut r), rand(&[4, 2], &mut r), rand(&[2], &mut r), rand(&[2, 4], &mut r)], Box::new(|g, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            let z = g.matmul_nt(v[0], v[3])?;
            let w = g.matmul(v[0], v[1])?;
            let s = g.add(y, z)?;
            let s = g.add(s, w)?;
            project(g, s, 4)
        })),
        ("add_row_bias", vec![rand(&[3, 4], &mut r), rand(&[4], &mut r)], Box::new(|g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            project(g, y, 5)
        })),
        ("conv2d/add_channel_bias", vec![rand(&[2, 3, 5, 6], &mut r), rand(&[4, 3, 3, 3], &mut r), rand(&[4], &mut r)], Box::new(|g, v| {
            let a = g.conv2d(v[0], v[1], 1, Padding::Same)?;
            let a = g.add_channel_bias(a, v[2])?;
            let b = g.conv2d(v[0], v[1], 2, Padding::Explicit(1))?;
            let c = g.conv2d(v[0], v[1], 1, Padding::Valid)?;
            let (pa, pb, pc) = (project(g, a, 6)?, project(g, b, 7)?, project(g, c, 8)?);
            let s = g.add(pa, pb)?;
            g.add(s, pc)
        })),
        ("conv_transpose2d", vec![rand(&[2, 3, 3, 4], &mut r), rand(&[3, 2, 3, 3], &mut r)], Box::new(|g, v| {
            let y = g.conv_transpose2d(v[0], v[1], 2)?;
            project(g, y, 9)
        })),
        ("narrow/concat/reshape/gather", vec![rand(&[3, 4, 2], &mut r), rand(&[3, 2, 2], &mut r)], Box::new(move |g, v| {
            let a = g.narrow(v[0], 1, 1, 2)?;
            let c = g.concat(&[a, v[1]], 1)?;
            let c = g.reshape(c, &[6, 4])?;
            let y = g.gather(v[0], idx.clone(), &[2, 3])?;
            let s1 = project(g, c, 10)?;
            let s2 = project(g, y, 11)?;
            g.add(s1, s2)
        })),
        ("layer_norm", vec![rand(&[3, 6], &mut r), rand(&[6], &mut r), rand(&[6], &mut r)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 12)
        })),
        ("batch_norm", vec![rand(&[3, 2, 2, 3], &mut r), rand(&[2], &mut r), rand(&[2], &mut r)], Box::new(move |g, v| {
            let (a, _, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            let (b, _, _) = g.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5)?;
            let s = g.add(a, b)?;
            project(g, s, 13)
        })),
        ("sum/mean/mse", vec![rand(&[3, 4], &mut r)], Box::new(|g, v| {
            let t = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
            let a = g.mse(v[0], &t)?;
            let b = g.mean(v[0])?;
            let c = g.sum(v[0])?;
            let s = g.add(a, b)?;
            let s = g.add(s, c)?;
            g.mul(s, s)
        })),
    ]
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let tol = 1e-4;
    let cfg = GradCheckConfig { eps: 1e-5, ..GradCheckConfig::default() };
    let mut worst = 0.0f64;
    for (name, inputs, f) in op_cases() {
        let rep = grad_check_inputs(&inputs, |g, v| f(g, v), cfg).map_err(|e| format!("{name}: {e}"))?;
        ensure(rep.passes(tol), format!("{name}: {rep:?}"))?;
        worst = worst.max(rep.max_rel_err);
    }
    for kind in ArchKind::ALL {
        let ac = ArchConfig::miniature(kind);
        let batch = random_batch(&ac, 2, 3);
        let model = Model::new(ac.clone(), Scaler::identity(), UNIT_BOUNDS).map_err(|e| e.to_string())?;
        let rep = grad_check(
            &model.store,
            |g, store| {
                let mut cx = Ctx::new(g, store, true);
                let y = model.forward(&mut cx, &batch)?;
                cx.g.mse(y, &batch.target)
            },
            GradCheckConfig { max_coords: 24, ..cfg },
        )
        .map_err(|e| format!("{kind}: {e}"))?;
        ensure(rep.passes(tol), format!("{kind}: {rep:?}"))?;
        worst = worst.max(rep.max_rel_err);
    }
    budget(t0.elapsed(), 300)?;
    Ok(format!("12 op groups and 4 architectures, max rel err {worst:.1e}"))
}

// ---------------------------------------------------------------- WeightNet

fn weightnet_training() -> Outcome {
    let t0 = Instant::now();
    let contexts = synthetic_contexts(50, 9, 5);
    let (net, log) = train_weightnet(&contexts, &WeightNetConfig { epochs: 200, seed: 5, ..Default::default() }).map_err(|e| e.to_string())?;
    let (first, last) = (log[0].loss, log.last().unwrap().loss);
    ensure(last < 0.1 * first, format!("final mse {last:.3e} vs epoch-1 {first:.3e}"))?;

    let mut rng = SplitMix64::new(9);
    for c in synthetic_contexts(200, 9, 77).iter().chain(&contexts) {
        let w = net.predict(c).map_err(|e| e.to_string())?;
        let s: f64 = w.as_slice().iter().sum();
        ensure(w.as_slice().iter().all(|&v| v >= 0.0) && (s - 1.0).abs() <= 1e-9, format!("bad weight vector {:?}", w.as_slice()))?;
    }
    let fresh = WeightNet::new(9, [64, 32], rng.next_u64());
    ensure((fresh.predict(&contexts[0]).unwrap().as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9, "untrained net output")?;

    let one = &contexts[..1];
    let (single, _) = train_weightnet(one, &WeightNetConfig { epochs: 300, batch: 1, lr: 3e-3, seed: 5, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let target = climrank::ranking::entropy_target_weights(&one[0]);
    let got = single.predict(&one[0]).unwrap();
    let linf = got.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(linf <= 0.05, format!("single-context L-inf {linf:.4}"))?;
    budget(t0.elapsed(), 120)?;
    Ok(format!("mse {first:.2e} -> {last:.2e} ({:.1}%), single-context L-inf {linf:.1e}", 100.0 * last / first))
}

// ---------------------------------------------------------------- downscaling

struct Fit {
    kind: ArchKind,
    overfit_mse: f64,
    test_rmse: f64,
    bilinear_rmse: f64,
}

fn overall_annual(rows: &[climrank::metrics::ReportRow], model: &str) -> Option<MetricReport> {
    rows.iter().find(|r| r.model == model && r.zone == ZoneScope::Overall && r.season == Season::Annual).map(|r| r.report.clone())
}

fn fit_one(kind: ArchKind) -> Result<Fit, String> {
    let e = |e: climrank::downscale::DownscaleError| format!("{kind}: {e}");
    let cfg = ArchConfig::desk(kind);

    let (c, f) = benchmark_pair(8, cfg.t, 0.0, 0.1, 7).map_err(e)?;
    let ds = build_dataset(&[&c], &f, cfg.t).map_err(e)?;
    let split = Split::all(ds.len());
    let mut m = Model::new(cfg.clone(), ds.fit_scaler(&split.train), ds.coord_bounds(cfg.patch)).map_err(e)?;
    let lr = if kind == ArchKind::ConvLstm { 2e-2 } else { 1e-2 };
    train(&mut m, &ds, &split, &TrainConfig { epochs: 500, lr, ..TrainConfig::default() }).map_err(e)?;
    let overfit_mse = validation_mse(&m, &ds, &split.train, 8).map_err(e)?;

    let (c, f) = benchmark_pair(200, cfg.t, 0.0, 0.1, 7).map_err(e)?;
    let ds = build_dataset(&[&c], &f, cfg.t).map_err(e)?;
    let split = Split::random(ds.len(), 0.15, 0.15, 1);
    let mut m = Model::new(cfg.clone(), ds.fit_scaler(&split.train), ds.coord_bounds(cfg.patch)).map_err(e)?;
    train(&mut m, &ds, &split, &TrainConfig::default()).map_err(e)?;
    let rows = evaluate(&[(kind.name(), &m)], &ds, &split.test, None, 50).map_err(e)?;
    let test_rmse = overall_annual(&rows, kind.name()).ok_or("missing row")?.rmse;
    let bilinear_rmse = overall_annual(&rows, "bilinear").ok_or("missing bilinear row")?.rmse;
    Ok(Fit { kind, overfit_mse, test_rmse, bilinear_rmse })
}

fn downscaler_capacity() -> Outcome {
    let t0 = Instant::now();
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let fits = par_map(&ArchKind::ALL, jobs, |&k| fit_one(k)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let detail: Vec<String> = fits
        .iter()
        .map(|f| format!("{} overfit {:.4} rmse {:.3}", f.kind, f.overfit_mse, f.test_rmse))
        .collect();
    let detail = format!("{}; bilinear {:.3}", detail.join(", "), fits[0].bilinear_rmse);
    for f in &fits {
        ensure(f.overfit_mse < 0.01, format!("{} overfit mse {:.4}: {detail}", f.kind, f.overfit_mse))?;
        ensure(f.test_rmse < f.bilinear_rmse, format!("{} does not beat bilinear: {detail}", f.kind))?;
    }
    let rmse = |k| fits.iter().find(|f| f.kind == k).unwrap().test_rmse;
    println!(
        "     note: geostanet rmse {:.3} {} convlstm rmse {:.3}",
        rmse(ArchKind::Geostanet),
        if rmse(ArchKind::Geostanet) <= rmse(ArchKind::ConvLstm) { "<=" } else { ">" },
        rmse(ArchKind::ConvLstm)
    );
    budget(t0.elapsed(), 1800)?;
    Ok(detail)
}

fn bias_correction() -> Outcome {
    let cfg = ArchConfig::desk(ArchKind::Geostanet);
    let (c, f) = benchmark_pair(200, cfg.t, 2.0, 0.1, 7).map_err(|e| e.to_string())?;
    let ds = build_dataset(&[&c], &f, cfg.t).map_err(|e| e.to_string())?;
    let split = Split::random(ds.len(), 0.15, 0.15, 1);
    let mut m = Model::new(cfg.clone(), ds.fit_scaler(&split.train), ds.coord_bounds(cfg.patch)).map_err(|e| e.to_string())?;
    train(&mut m, &ds, &split, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let rows = evaluate(&[("geostanet", &m)], &ds, &split.test, None, 50).map_err(|e| e.to_string())?;
    let raw = overall_annual(&rows, "bilinear").unwrap().bias;
    let out = overall_annual(&rows, "geostanet").unwrap().bias;
    let detail = format!("coarse input bias {raw:+.3}, downscaled bias {out:+.3}");
    ensure(out.abs() < 0.5, detail.clone())?;
    ensure(raw.abs() >= 3.0 * out.abs(), format!("reduction below 3x: {detail}"))?;
    ensure((raw - 2.0).abs() < 0.2, format!("raw bias not near 2: {detail}"))?;
    Ok(format!("{detail}, reduction {:.0}x", raw.abs() / out.abs().max(1e-12)))
}

// ---------------------------------------------------------------- pipeline

fn ranking_fixture() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_fixture(dir.path(), &FixtureSpec::default()).map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::load(&config).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["run_a", "run_b"] {
        cfg.output = dir.path().join(name);
        runs.push(pipeline::run(&cfg, Stages::Rank, None, 2).map_err(|e| e.to_string())?);
    }
    let table = &runs[0].rank.as_ref().unwrap().table;
    let losers: Vec<String> =
        table.contexts.iter().filter(|c| c.result.winner().model != "unbiased").map(|c| c.context.to_string()).collect();
    ensure(losers.is_empty(), format!("unbiased not first in {losers:?}"))?;
    let read = |r: &pipeline::RunOutput| std::fs::read(r.run_dir.join(pipeline::MANIFEST_FILE)).map_err(|e| e.to_string());
    ensure(read(&runs[0])? == read(&runs[1])?, "manifests differ between reruns")?;
    budget(t0.elapsed(), 60)?;
    Ok(format!("unbiased first in all {} contexts; manifests byte-identical", table.contexts.len()))
}

fn cube(meta: CubeMeta, time: Vec<Date>, lat: Vec<f64>, lon: Vec<f64>, data: Vec<f64>) -> DataCube {
    DataCube::new(meta, time, GridAxis::lat(lat).unwrap(), GridAxis::lon(lon).unwrap(), data).unwrap()
}

fn regrid_suite() -> Outcome {
    let mut rng = SplitMix64::new(8);
    let meta = CubeMeta::celsius(Variable::Other("tas".into()), Calendar::NoLeap);
    let days = Calendar::NoLeap.daily_series(Date::new(2001, 1, 1), 2);
    let src_lat: Vec<f64> = (0..7).map(|i| 40.0 + 0.5 * i as f64).collect();
    let src_lon: Vec<f64> = (0..9).map(|j| 10.0 + 0.5 * j as f64).collect();
    let dst_lat = GridAxis::regular(AxisKind::Lat, 40.1, 0.13, 20).unwrap();
    let dst_lon = GridAxis::regular(AxisKind::Lon, 10.2, 0.17, 20).unwrap();
    let field = |rng: &mut SplitMix64| (0..2 * 63).map(|_| rng.uniform(-10.0, 30.0)).collect::<Vec<f64>>();
    let (a, b) = (field(&mut rng), field(&mut rng));
    let ca = cube(meta.clone(), days.clone(), src_lat.clone(), src_lon.clone(), a.clone());
    let cb = cube(meta.clone(), days.clone(), src_lat.clone(), src_lon.clone(), b.clone());

    let same = regrid_bilinear(&ca, ca.lat(), ca.lon()).unwrap();
    ensure(same.data() == ca.data(), "identity regrid changed values")?;

    let ra = regrid_bilinear(&ca, &dst_lat, &dst_lon).unwrap();
    let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    ensure(ra.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12), "interior regrid escaped the source range")?;

    let (alpha, beta) = (1.7, -0.6);
    let mix = cube(meta.clone(), days.clone(), src_lat.clone(), src_lon.clone(), a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect());
    let rb = regrid_bilinear(&cb, &dst_lat, &dst_lon).unwrap();
    let rm = regrid_bilinear(&mix, &dst_lat, &dst_lon).unwrap();
    let lin = rm.data().iter().zip(ra.data().iter().zip(rb.data())).map(|(m, (x, y))| (m - (alpha * x + beta * y)).abs()).fold(0.0, f64::max);
    ensure(lin <= 1e-12, format!("linearity error {lin:.2e}"))?;

    let unit = cube(meta.clone(), days[..1].to_vec(), vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 2.0, 1.0, 3.0]);
    let p = regrid_bilinear(&unit, &GridAxis::lat(vec![0.5]).unwrap(), &GridAxis::lon(vec![0.5]).unwrap()).unwrap();
    ensure((p.data()[0] - 1.5).abs() < 1e-15, format!("hand point gave {}", p.data()[0]))?;

    for cal in [Calendar::Standard, Calendar::NoLeap, Calendar::Day360] {
        let time = cal.daily_series(Date::new(1999, 11, 15), 3 * 366);
        let n = time.len();
        let c = cube(CubeMeta::celsius(Variable::Other("tas".into()), cal), time.clone(), vec![0.0, 1.0], vec![0.0, 1.0], (0..4 * n).map(|v| v as f64).collect());
        let mut seen: Vec<Date> = Vec::new();
        for s in Season::QUARTERS {
            let part = c.select_season(s).unwrap();
            ensure(part.time().iter().all(|d| s.contains(d.month)), format!("{cal:?} {s}: foreign month"))?;
            seen.extend_from_slice(part.time());
        }
        seen.sort();
        let mut all = time.clone();
        all.sort();
        ensure(seen == all, format!("{cal:?}: seasons are not a partition"))?;
        ensure(c.select_season(Season::Annual).unwrap() == c, format!("{cal:?}: annual is not the whole series"))?;
    }
    Ok(format!("identity, bounds, linearity err {lin:.0e}, hand point 1.5, 3-calendar partitions"))
}

fn same_bits(a: &DataCube, b: &DataCube) -> bool {
    a.meta().variable == b.meta().variable
        && a.meta().units == b.meta().units
        && a.calendar() == b.calendar()
        && a.fill().to_bits() == b.fill().to_bits()
        && a.time() == b.time()
        && a.lat() == b.lat()
        && a.lon() == b.lon()
        && a.data().len() == b.data().len()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn gcf_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = SplitMix64::new(99);
    let calendars = [Calendar::Standard, Calendar::NoLeap, Calendar::Day360];
    let mut fills = 0;
    for case in 0..100 {
        let (nt, nlat, nlon) = (1 + rng.below(6) as usize, 1 + rng.below(9) as usize, 1 + rng.below(9) as usize);
        let cal = calendars[case % 3];
        let fill = if case % 4 == 0 { f64::NAN } else { -9999.0 };
        let meta = CubeMeta { variable: [Variable::Tasmax, Variable::Tasmin, Variable::Dtr][case % 3].clone(), units: "degC".into(), calendar: cal, fill };
        let data: Vec<f64> = (0..nt * nlat * nlon)
            .map(|_| if rng.next_f64() < 0.1 { fills += 1; fill } else { (rng.normal() * 20.0) as f32 as f64 })
            .collect();
        let lat: Vec<f64> = (0..nlat).map(|i| -60.0 + 1.25 * i as f64).collect();
        let lon: Vec<f64> = (0..nlon).map(|j| 100.0 + 0.75 * j as f64).collect();
        let c = cube(meta, cal.daily_series(Date::new(1990, 2, 27), nt), lat, lon, data);
        let path = dir.path().join(format!("c{case}"));
        write_cube(&c, &path).map_err(|e| e.to_string())?;
        let back = read_cube(&path).map_err(|e| e.to_string())?;
        ensure(same_bits(&c, &back), format!("cube {case} changed on round trip"))?;
    }
    for kind in ArchKind::ALL {
        let ac = ArchConfig::miniature(kind);
        let m = Model::new(ac, Scaler::identity(), UNIT_BOUNDS).unwrap();
        let path = dir.path().join(kind.name());
        m.save(&path, 3).map_err(|e| e.to_string())?;
        let back = Model::load(&path).map_err(|e| e.to_string())?;
        let bits = |s: &climrank::tensor::ParamStore| s.ids().flat_map(|id| s.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        ensure(bits(&m.store) == bits(&back.store) && back.config == m.config, format!("{kind} checkpoint changed"))?;
    }
    Ok(format!("100 cubes ({fills} fill cells), 4 checkpoints bit-identical"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric oracle equivalence", metric_oracles),
        ("TOPSIS property suite", topsis_properties),
        ("gradient correctness", gradient_checks),
        ("WeightNet training", weightnet_training),
        ("downscaler capacity", downscaler_capacity),
        ("synthetic bias correction", bias_correction),
        ("end-to-end ranking fixture", ranking_fixture),
        ("regrid and season suite", regrid_suite),
        ("GCF and checkpoint round trip", gcf_round_trip),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {}: {name} ({secs:.1}s) {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({secs:.1}s) {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
