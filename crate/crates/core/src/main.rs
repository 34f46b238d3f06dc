use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use climrank::downscale::{ArchConfig, ArchKind, Split, TrainConfig};
use climrank::geogrid::{read_csv_cube, read_cube, regrid_bilinear, write_cube, Calendar, CsvMeta, Variable, DEFAULT_FILL};
use climrank::pipeline::{
    self, eval_checkpoint, load_data_dir, train_one, write_fixture, AtStage, FixtureSpec, PipelineConfig, PipelineError, Result,
    Stages,
};

#[derive(Parser)]
#[command(name = "climrank", version, about = "Rank coarse climate models and downscale their output")]
struct Cli {
    /// Global seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for independent models, contexts and architectures.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Root for relative run directories.
    #[arg(long, global = true, env = "CLIMRANK_OUT")]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a long-format CSV (date,lat,lon,value) into a GCF cube.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        variable: String,
        #[arg(long, default_value = "standard")]
        calendar: String,
        #[arg(long, default_value = "degC")]
        units: String,
        #[arg(long, default_value_t = DEFAULT_FILL)]
        fill: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bilinear regridding of a cube onto another cube's grid.
    Regrid {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        like: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regrid and score every configured model (rank/reports.csv).
    Metrics,
    /// Full ranking pipeline: metrics, weights, TOPSIS, exports and manifest.
    Rank,
    /// Train, evaluate or run the downscaling architectures.
    #[command(subcommand)]
    Downscale(DownscaleCmd),
    /// Plot-ready tables and rasters from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write the bundled synthetic fixture and its config.
    Fixture {
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end checks on the bundled fixture.
    Selftest {
        /// Keep the fixture and runs here instead of a temporary directory.
        #[arg(long)]
        keep: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DownscaleCmd {
    /// Train one architecture on `<data>/coarse` -> `<data>/fine`.
    Train(TrainArgs),
    /// Score a checkpoint and the bilinear baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = climrank::metrics::DEFAULT_PDF_BINS)]
        bins: usize,
    },
    /// Train and evaluate every architecture in the config's downscale section.
    Run,
}

#[derive(Args)]
struct TrainArgs {
    /// cnn_lstm, convlstm, vit or geostanet.
    #[arg(long)]
    arch: ArchKind,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; the checkpoint goes to `<out>/checkpoint`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().ok_or_else(|| PipelineError::validation("config", "--config is required"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_stages(cli: &Cli, stages: Stages) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = pipeline::run(&cfg, stages, cli.out_root.as_deref(), cli.jobs)?;
    if let Some(r) = &out.rank {
        for c in &r.table.contexts {
            println!("{:<24} {}", c.context.to_string(), c.result.winner().model);
        }
    }
    if let Some(d) = &out.downscale {
        for row in d.rows.iter().filter(|r| r.zone == climrank::geogrid::ZoneScope::Overall && r.season == climrank::geogrid::Season::Annual) {
            println!("{:<10} rmse {:.4} bias {:+.4}", row.model, row.report.rmse, row.report.bias);
        }
    }
    println!("run directory: {}", out.run_dir.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let (mut arch, mut tc, val, test, seed) = match &cli.config {
        Some(_) => {
            let cfg = load_config(cli)?;
            let d = cfg.downscale.unwrap_or_else(default_downscale);
            let arch = d.archs.iter().find(|x| x.kind == a.arch).cloned().unwrap_or_else(|| ArchConfig::desk(a.arch));
            (arch, d.train, d.val_frac, d.test_frac, cfg.seed)
        }
        None => (ArchConfig::desk(a.arch), TrainConfig::default(), 0.15, 0.15, cli.seed.unwrap_or(0)),
    };
    arch.kind = a.arch;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    arch.validate().at("config")?;
    let ds = load_data_dir(&a.data, arch.t)?;
    let split = Split::random(ds.len(), val, test, seed);
    let (_, report, _, log) = train_one(&arch, &tc, &ds, &split, seed, &a.out)?;
    println!("best epoch {} val mse {:.5}; log {}", report.best_epoch, report.best_val, log.display());
    Ok(())
}

fn default_downscale() -> pipeline::DownscaleSection {
    pipeline::DownscaleSection {
        data: pipeline::DataSource::TopRanked,
        archs: ArchKind::ALL.iter().map(|&k| ArchConfig::desk(k)).collect(),
        train: TrainConfig::default(),
        val_frac: 0.15,
        test_frac: 0.15,
        mask: None,
        bins: climrank::metrics::DEFAULT_PDF_BINS,
    }
}

fn selftest(cli: &Cli, keep: Option<&Path>) -> Result<bool> {
    let dir = match keep {
        Some(d) => d.to_path_buf(),
        None => tempdir()?,
    };
    let config = write_fixture(&dir.join("fixture"), &FixtureSpec::default())?;
    let mut cfg = PipelineConfig::load(&config)?;
    cfg.output = dir.join("run_a");
    let a = pipeline::run(&cfg, Stages::Rank, None, cli.jobs)?;
    cfg.output = dir.join("run_b");
    let b = pipeline::run(&cfg, Stages::Rank, None, cli.jobs)?;
    let table = &a.rank.as_ref().expect("rank ran").table;
    let mut ok = true;
    let mut check = |name: &str, pass: bool| {
        println!("{} {name}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    check("unbiased model first in every context", table.contexts.iter().all(|c| c.result.winner().model == "unbiased"));
    check("rerun manifests identical", a.manifest == b.manifest);
    check("report bundle", pipeline::report(&a.run_dir).map(|f| !f.is_empty()).unwrap_or(false));

    let d = cfg.downscale.as_mut().expect("fixture has a downscale section");
    d.data = pipeline::DataSource::Synthetic { samples: 24, bias: 2.0, noise_sd: 0.1, seed: 3 };
    d.train.epochs = 2;
    cfg.output = dir.join("run_downscale");
    let out = pipeline::run(&cfg, Stages::Downscale, None, cli.jobs)?;
    let rows = &out.downscale.expect("downscale ran").rows;
    check("downscale report has every architecture and the baseline", rows.iter().map(|r| r.model.as_str()).collect::<std::collections::BTreeSet<_>>().len() == 5);
    if keep.is_none() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    Ok(ok)
}

fn tempdir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("climrank-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io("selftest", &dir, e))?;
    Ok(dir)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Ingest { csv, variable, calendar, units, fill, out } => {
            let calendar: Calendar = calendar.parse().at("ingest")?;
            let variable: Variable = variable.parse().unwrap_or_else(|never| match never {});
            let meta = CsvMeta { variable, units: units.clone(), calendar, fill: *fill };
            let cube = read_csv_cube(csv, &meta).at("ingest")?;
            write_cube(&cube, out).at("ingest")?;
            let (nt, nlat, nlon) = cube.dims();
            println!("{nt} x {nlat} x {nlon} cube written to {}", out.display());
        }
        Cmd::Regrid { src, like, out } => {
            let like = read_cube(like).at("regrid")?;
            let cube = regrid_bilinear(&read_cube(src).at("regrid")?, like.lat(), like.lon()).at("regrid")?;
            write_cube(&cube, out).at("regrid")?;
        }
        Cmd::Metrics => run_stages(cli, Stages::MetricsOnly)?,
        Cmd::Rank => run_stages(cli, Stages::Rank)?,
        Cmd::Downscale(DownscaleCmd::Run) => run_stages(cli, Stages::Downscale)?,
        Cmd::Downscale(DownscaleCmd::Train(a)) => train_cmd(cli, a)?,
        Cmd::Downscale(DownscaleCmd::Eval { ckpt, data, mask, report, bins }) => {
            let rows = eval_checkpoint(ckpt, data, mask.as_deref(), *bins, report)?;
            println!("{} report rows written to {}", rows.len(), report.display());
        }
        Cmd::Report { run } => {
            for f in pipeline::report(run)? {
                println!("{}", f.display());
            }
        }
        Cmd::Fixture { out } => {
            let path = write_fixture(out, &FixtureSpec { seed: cli.seed.unwrap_or(FixtureSpec::default().seed), ..FixtureSpec::default() })?;
            println!("{}", path.display());
        }
        Cmd::Selftest { keep } => return selftest(cli, keep.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
