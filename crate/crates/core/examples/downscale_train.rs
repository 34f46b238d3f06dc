//! Train one downscaling architecture on the synthetic benchmark and compare
//! it with bilinear upsampling on the held-out split.
//!
//! `cargo run --release --example downscale_train -- geostanet 20`

use climrank::downscale::{benchmark_pair, build_dataset, evaluate, train, ArchConfig, ArchKind, Model, Split, TrainConfig};
use climrank::geogrid::{Season, ZoneScope};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let kind: ArchKind = args.next().as_deref().unwrap_or("geostanet").parse()?;
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);

    let cfg = ArchConfig::desk(kind);
    let (coarse, fine) = benchmark_pair(120, cfg.t, 0.0, 0.1, 7)?;
    let ds = build_dataset(&[&coarse], &fine, cfg.t)?;
    let split = Split::random(ds.len(), 0.15, 0.15, 1);
    let mut model = Model::new(cfg.clone(), ds.fit_scaler(&split.train), ds.coord_bounds(cfg.patch))?;

    let report = train(&mut model, &ds, &split, &TrainConfig { epochs, ..TrainConfig::default() })?;
    for l in &report.logs {
        println!("epoch {:>3} train {:.5} val {:.5}", l.epoch, l.train_loss, l.val_loss);
    }
    println!("best epoch {}", report.best_epoch);

    let rows = evaluate(&[(kind.name(), &model)], &ds, &split.test, None, 50)?;
    for r in rows.iter().filter(|r| r.zone == ZoneScope::Overall && r.season == Season::Annual) {
        println!("{:<10} rmse {:.4} bias {:+.4}", r.model, r.report.rmse, r.report.bias);
    }
    Ok(())
}
