use std::path::Path;
use std::process::{Command, Output};

fn climrank(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_climrank"))
        .args(args)
        .env("CLIMRANK_OUT", out_root)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fixture_rank_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    let out = dir.path().join("out");
    assert_eq!(code(&climrank(&["fixture", "--out", s(&fx)], &out)), 0);
    let cfg = fx.join("config.json");

    let rank = climrank(&["rank", "--config", s(&cfg), "--jobs", "2"], &out);
    assert_eq!(code(&rank), 0, "{}", String::from_utf8_lossy(&rank.stderr));
    let stdout = String::from_utf8_lossy(&rank.stdout);
    assert!(stdout.lines().filter(|l| l.contains('/')).all(|l| l.ends_with("unbiased") || l.starts_with("run directory")));

    // The relative output directory lands under the env-provided root.
    let run = out.join("fixture_run");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["stages"]["rank"]["outputs"]["rank/ranking.csv"].is_string());

    assert_eq!(code(&climrank(&["report", "--run", s(&run)], &out)), 0);
    assert!(run.join("report/zone_season.csv").is_file());

    let reseeded = climrank(&["rank", "--config", s(&cfg), "--seed", "5"], &out);
    assert_eq!(code(&reseeded), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["stages"].get("report").is_none(), "a reseeded run starts a fresh manifest");
}

#[test]
fn exit_code_classes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"schema": 2, "seed": 0, "output": "x", "ranking": null}"#).unwrap();
    assert_eq!(code(&climrank(&["rank", "--config", s(&bad)], root)), 2);

    let unknown = root.join("unknown.json");
    std::fs::write(&unknown, r#"{"schema": 1, "seed": 0, "output": "x", "colour": "blue"}"#).unwrap();
    assert_eq!(code(&climrank(&["metrics", "--config", s(&unknown)], root)), 2);

    let nan = root.join("nan.csv");
    std::fs::write(&nan, "date,lat,lon,value\n2000-01-01,1,2,NaN\n2000-01-01,1,3,1\n2000-01-01,2,2,1\n2000-01-01,2,3,1\n").unwrap();
    let o = climrank(&["ingest", "--csv", s(&nan), "--variable", "tasmax", "--out", s(&root.join("c"))], root);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(code(&climrank(&["rank", "--config", s(&root.join("missing.json"))], root)), 4);
    let missing = root.join("nowhere");
    assert_eq!(code(&climrank(&["regrid", "--src", s(&missing), "--like", s(&missing), "--out", s(&root.join("r"))], root)), 4);
    assert_eq!(code(&climrank(&["report", "--run", s(root)], root)), 2);
}

#[test]
fn ingest_then_regrid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let csv = root.join("in.csv");
    let mut text = String::from("date,lat,lon,value\n");
    for d in ["2000-01-01", "2000-01-02"] {
        for lat in [0.0, 1.0] {
            for lon in [0.0, 1.0] {
                text += &format!("{d},{lat},{lon},{}\n", lat + 2.0 * lon);
            }
        }
    }
    std::fs::write(&csv, text).unwrap();
    let src = root.join("src");
    assert_eq!(code(&climrank(&["ingest", "--csv", s(&csv), "--variable", "tasmax", "--calendar", "noleap", "--out", s(&src)], root)), 0);
    let cube = climrank::geogrid::read_cube(&src).unwrap();
    assert_eq!(cube.dims(), (2, 2, 2));

    let like = root.join("like");
    let grid = |v: Vec<f64>| climrank::geogrid::GridAxis::new(climrank::geogrid::AxisKind::Lat, v).unwrap();
    let target = climrank::geogrid::DataCube::new(
        cube.meta().clone(),
        cube.time().to_vec(),
        grid(vec![0.5]),
        climrank::geogrid::GridAxis::lon(vec![0.5]).unwrap(),
        vec![0.0, 0.0],
    )
    .unwrap();
    climrank::geogrid::write_cube(&target, &like).unwrap();
    let out = root.join("out");
    assert_eq!(code(&climrank(&["regrid", "--src", s(&src), "--like", s(&like), "--out", s(&out)], root)), 0);
    assert_eq!(climrank::geogrid::read_cube(&out).unwrap().data(), &[1.5, 1.5]);
}
