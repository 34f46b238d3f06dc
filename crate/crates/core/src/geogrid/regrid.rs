use super::{DataCube, GridAxis, GridError, Result, ZoneMask};

/// Interpolation stencil along one axis: lower node index and the weight of
/// the upper node.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    lo: usize,
    frac: f64,
}

fn stencils(src: &GridAxis, dst: &GridAxis) -> Vec<Stencil> {
    let s = src.values();
    let n = s.len();
    dst.values()
        .iter()
        .map(|&x| {
            // Targets outside the source hull clamp to the nearest edge.
            let x = x.clamp(s[0], s[n - 1]);
            let lo = match s.partition_point(|&v| v <= x) {
                0 => 0,
                p => (p - 1).min(n - 2),
            };
            let frac = (x - s[lo]) / (s[lo + 1] - s[lo]);
            Stencil { lo, frac }
        })
        .collect()
}

/// Bilinear interpolation of every time slice onto `(dst_lat, dst_lon)`.
///
/// A destination value is fill when any corner carrying nonzero weight is
/// fill, so ocean fill never bleeds into land cells.
pub fn regrid_bilinear(src: &DataCube, dst_lat: &GridAxis, dst_lon: &GridAxis) -> Result<DataCube> {
    for axis in [src.lat(), src.lon()] {
        if axis.len() < 2 {
            return Err(GridError::Axis {
                axis: format!("{:?}", axis.kind()).to_lowercase(),
                reason: "bilinear interpolation needs at least 2 source nodes".into(),
            });
        }
    }
    let ys = stencils(src.lat(), dst_lat);
    let xs = stencils(src.lon(), dst_lon);
    let (nt, _, snlon) = src.dims();
    let fill = src.fill();
    let mut out = Vec::with_capacity(nt * ys.len() * xs.len());
    for t in 0..nt {
        let slice = src.slice(t);
        for y in &ys {
            for x in &xs {
                let corners = [
                    ((1.0 - y.frac) * (1.0 - x.frac), y.lo, x.lo),
                    ((1.0 - y.frac) * x.frac, y.lo, x.lo + 1),
                    (y.frac * (1.0 - x.frac), y.lo + 1, x.lo),
                    (y.frac * x.frac, y.lo + 1, x.lo + 1),
                ];
                let mut acc = 0.0;
                let mut is_fill = false;
                for (w, i, j) in corners {
                    if w == 0.0 {
                        continue;
                    }
                    let v = slice[i * snlon + j];
                    if src.is_fill(v) {
                        is_fill = true;
                        break;
                    }
                    acc += w * v;
                }
                out.push(if is_fill { fill } else { acc });
            }
        }
    }
    DataCube::new(src.meta().clone(), src.time().to_vec(), dst_lat.clone(), dst_lon.clone(), out)
}

fn nearest(src: &GridAxis, x: f64) -> usize {
    let s = src.values();
    let p = s.partition_point(|&v| v < x);
    if p == 0 {
        0
    } else if p == s.len() {
        s.len() - 1
    } else if x - s[p - 1] <= s[p] - x {
        p - 1
    } else {
        p
    }
}

/// Zone codes are categorical, so masks move between grids by nearest node.
pub fn regrid_mask_nearest(mask: &ZoneMask, dst_lat: &GridAxis, dst_lon: &GridAxis) -> Result<ZoneMask> {
    let iy: Vec<usize> = dst_lat.values().iter().map(|&y| nearest(&mask.lat, y)).collect();
    let ix: Vec<usize> = dst_lon.values().iter().map(|&x| nearest(&mask.lon, x)).collect();
    let codes = iy.iter().flat_map(|&i| ix.iter().map(move |&j| mask.get(i, j))).collect();
    ZoneMask::new(dst_lat.clone(), dst_lon.clone(), codes)
}
