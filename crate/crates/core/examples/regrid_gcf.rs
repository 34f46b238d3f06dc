//! Regrid a coarse cube onto a fine grid, write it as GCF, read it back and
//! split it by season.

use climrank::geogrid::{read_cube, regrid_bilinear, synth_pair, write_cube, Season, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (coarse, fine) = synth_pair(&SynthConfig::new(5, 4, 730, 24, 24, 0.0, 0.2))?;
    let up = regrid_bilinear(&coarse, fine.lat(), fine.lon())?;
    println!("coarse {:?} -> regridded {:?}", coarse.dims(), up.dims());

    let dir = std::env::temp_dir().join(format!("climrank-regrid-{}", std::process::id()));
    write_cube(&up, &dir)?;
    let back = read_cube(&dir)?;
    let narrowing = up.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("f32 storage error {narrowing:.2e}");
    write_cube(&back, &dir)?;
    println!("second round trip identical: {}", read_cube(&dir)? == back);
    std::fs::remove_dir_all(&dir)?;

    for s in Season::ALL {
        let part = up.select_season(s)?;
        let mean = part.data().iter().sum::<f64>() / part.data().len() as f64;
        println!("{s:<7} {:>4} days  mean {mean:.2}", part.time().len());
    }
    Ok(())
}
