//! Write the bundled fixture, run the ranking pipeline on it and build the
//! report bundle.

use climrank::pipeline::{self, write_fixture, FixtureSpec, PipelineConfig, Stages};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("climrank-fixture-{}", std::process::id()));
    let spec = FixtureSpec { days: 120, ..FixtureSpec::default() };
    let config = write_fixture(&dir, &spec)?;
    let cfg = PipelineConfig::load(&config)?;

    // The config's relative output directory resolves against the root given here.
    let out = pipeline::run(&cfg, Stages::Rank, Some(&dir), 2)?;
    let table = &out.rank.as_ref().expect("rank stage ran").table;
    for c in &table.contexts {
        let order: Vec<&str> = c.result.ranked().map(|(_, s)| s.model.as_str()).collect();
        println!("{:<24} {}", c.context.to_string(), order.join(" > "));
    }
    for f in pipeline::report(&out.run_dir)? {
        println!("wrote {}", f.strip_prefix(&dir).unwrap_or(&f).display());
    }
    for (stage, rec) in &out.manifest.stages {
        println!("{stage}: {} files", rec.outputs.len());
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
