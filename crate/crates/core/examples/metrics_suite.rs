//! Score a biased coarse model against fine observations in every zone and season.

use climrank::geogrid::{regrid_bilinear, synth_pair, Season, SynthConfig, Zone, ZoneMask, ZoneScope};
use climrank::metrics::{full_report, Metric, DEFAULT_PDF_BINS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (coarse, obs) = synth_pair(&SynthConfig::new(3, 4, 365, 32, 32, 1.5, 0.4))?;
    let model = regrid_bilinear(&coarse, obs.lat(), obs.lon())?;

    // Two zones split down the middle of the grid.
    let nlon = obs.lon().len();
    let codes = (0..obs.cells()).map(|k| if k % nlon < nlon / 2 { Zone::Arid.code() } else { Zone::Temperate.code() }).collect();
    let mask = ZoneMask::new(obs.lat().clone(), obs.lon().clone(), codes)?;

    print!("{:<20}", "context");
    for m in Metric::ALL {
        print!("{:>12}", m.name());
    }
    println!();
    for zone in [ZoneScope::Single(Zone::Arid), ZoneScope::Single(Zone::Temperate), ZoneScope::Overall] {
        for season in Season::ALL {
            let r = full_report(&model, &obs, &mask, zone, season, DEFAULT_PDF_BINS)?;
            print!("{:<20}", format!("{zone}/{season}"));
            for m in Metric::ALL {
                match r.get(m) {
                    Some(v) => print!("{v:>12.4}"),
                    None => print!("{:>12}", "n/a"),
                }
            }
            println!();
        }
    }
    Ok(())
}
