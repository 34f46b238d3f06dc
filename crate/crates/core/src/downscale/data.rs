use serde::{Deserialize, Serialize};

use super::{upsample_bilinear, ArchConfig, CoordBounds, DownscaleError, Result};
use crate::geogrid::{synth_pair, CubeMeta, DataCube, Date, GridAxis, SynthConfig};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// `z = (v - mean) / sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub sd: f64,
}

impl Scaler {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        let (mut n, mut s, mut ss) = (0.0, 0.0, 0.0);
        for &v in values {
            n += 1.0;
            s += v;
            ss += v * v;
        }
        let mean = if n > 0.0 { s / n } else { 0.0 };
        let var = if n > 0.0 { (ss / n - mean * mean).max(0.0) } else { 0.0 };
        Self { mean, sd: if var > 0.0 { var.sqrt() } else { 1.0 } }
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Windows of `t` coarse frames paired with the fine field of the last frame.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub coarse: [usize; 2],
    pub factor: usize,
    pub t: usize,
    pub channels: usize,
    /// Per sample, `t x channels x h x w`, physical units.
    pub inputs: Vec<Vec<f64>>,
    /// Per sample, fine field of the last frame.
    pub targets: Vec<Vec<f64>>,
    /// Per sample, bilinear upsampling of the last frame's first channel.
    pub baselines: Vec<Vec<f64>>,
    pub dates: Vec<Date>,
    pub coarse_lat: Vec<f64>,
    pub coarse_lon: Vec<f64>,
    pub fine_lat: GridAxis,
    pub fine_lon: GridAxis,
    pub meta: CubeMeta,
}

/// Build samples from aligned coarse cubes (one per input channel; the first
/// must hold the target variable) and the fine target cube.
pub fn build_dataset(coarse: &[&DataCube], fine: &DataCube, t: usize) -> Result<Dataset> {
    let first = *coarse.first().ok_or_else(|| DownscaleError::Data("no coarse input cube".into()))?;
    let (nt, h, w) = first.dims();
    let (nt_f, hf, wf) = fine.dims();
    if t == 0 || nt < t {
        return Err(DownscaleError::Data(format!("need at least t = {t} time steps, cube has {nt}")));
    }
    if nt_f != nt || fine.time() != first.time() {
        return Err(DownscaleError::Data("coarse and fine cubes have different time axes".into()));
    }
    if hf % h != 0 || wf % w != 0 || hf / h != wf / w || hf / h < 2 {
        return Err(DownscaleError::Data(format!("fine grid {hf}x{wf} is not an integer multiple >= 2 of coarse {h}x{w}")));
    }
    let factor = hf / h;
    for c in coarse {
        if c.dims() != first.dims() || c.time() != first.time() || c.lat() != first.lat() || c.lon() != first.lon() {
            return Err(DownscaleError::Data("coarse input cubes are not aligned".into()));
        }
        if c.fill_count() > 0 {
            return Err(DownscaleError::Data(format!("coarse {} cube contains {} fill values", c.variable(), c.fill_count())));
        }
    }
    if fine.fill_count() > 0 {
        return Err(DownscaleError::Data(format!("fine cube contains {} fill values", fine.fill_count())));
    }
    let mut ds = Dataset {
        coarse: [h, w],
        factor,
        t,
        channels: coarse.len(),
        inputs: Vec::new(),
        targets: Vec::new(),
        baselines: Vec::new(),
        dates: Vec::new(),
        coarse_lat: first.lat().values().to_vec(),
        coarse_lon: first.lon().values().to_vec(),
        fine_lat: fine.lat().clone(),
        fine_lon: fine.lon().clone(),
        meta: fine.meta().clone(),
    };
    for k in t - 1..nt {
        let mut x = Vec::with_capacity(t * coarse.len() * h * w);
        for s in k + 1 - t..=k {
            for c in coarse {
                x.extend_from_slice(c.slice(s));
            }
        }
        ds.inputs.push(x);
        ds.targets.push(fine.slice(k).to_vec());
        ds.baselines.push(upsample_bilinear(first.slice(k), h, w, factor));
        ds.dates.push(fine.time()[k]);
    }
    Ok(ds)
}

/// The desk benchmark: 64x64 fine grid, factor 4, `samples` windows of `t` days.
pub fn benchmark_pair(samples: usize, t: usize, bias: f64, noise_sd: f64, seed: u64) -> Result<(DataCube, DataCube)> {
    Ok(synth_pair(&SynthConfig::new(seed, 4, samples + t - 1, 64, 64, bias, noise_sd))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded random split; each part sorted.
    pub fn random(n: usize, val_frac: f64, test_frac: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        SplitMix64::stream(seed, 0x73706c6974).shuffle(&mut idx);
        let n_test = ((n as f64) * test_frac).round() as usize;
        let n_val = ((n as f64) * val_frac).round() as usize;
        let mut test = idx[..n_test].to_vec();
        let mut val = idx[n_test..n_test + n_val].to_vec();
        let mut train = idx[n_test + n_val..].to_vec();
        test.sort_unstable();
        val.sort_unstable();
        train.sort_unstable();
        Self { train, val, test }
    }

    /// Every sample in every part (for overfitting checks).
    pub fn all(n: usize) -> Self {
        let all: Vec<usize> = (0..n).collect();
        Self { train: all.clone(), val: all.clone(), test: all }
    }
}

/// Model-ready tensors for a set of samples, in standardized units.
#[derive(Debug, Clone)]
pub struct Batch {
    /// One `[n, channels, h, w]` tensor per frame, oldest first.
    pub frames: Vec<Tensor>,
    /// `[n, 1, hf, wf]`.
    pub baseline: Tensor,
    /// `[n, 1, hf, wf]`.
    pub target: Tensor,
    /// Patch-centre `(lat, lon)` in [-1, 1], `[n * tokens, 2]`.
    pub coords: Tensor,
    pub n: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn fine(&self) -> [usize; 2] {
        [self.coarse[0] * self.factor, self.coarse[1] * self.factor]
    }

    /// Scaler fitted on the targets of `idx`.
    pub fn fit_scaler(&self, idx: &[usize]) -> Scaler {
        Scaler::fit(idx.iter().flat_map(|&i| self.targets[i].iter()))
    }

    /// Patch-centre coordinates in degrees, row-major over the patch grid.
    pub fn patch_centres(&self, patch: usize) -> Vec<[f64; 2]> {
        let centre = |axis: &[f64], b: usize| axis[b * patch..(b + 1) * patch].iter().sum::<f64>() / patch as f64;
        let (gh, gw) = (self.coarse[0] / patch, self.coarse[1] / patch);
        (0..gh * gw).map(|k| [centre(&self.coarse_lat, k / gw), centre(&self.coarse_lon, k % gw)]).collect()
    }

    /// Bounds spanning the patch centres, so they normalize onto [-1, 1].
    pub fn coord_bounds(&self, patch: usize) -> CoordBounds {
        let c = self.patch_centres(patch.max(1));
        let span = |k: usize| {
            let lo = c.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let hi = c.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            [lo, hi]
        };
        CoordBounds { lat: span(0), lon: span(1) }
    }

    pub fn check_compatible(&self, cfg: &ArchConfig) -> Result<()> {
        if self.coarse != cfg.coarse || self.factor != cfg.factor || self.t != cfg.t || self.channels != cfg.channels {
            return Err(DownscaleError::Config(format!(
                "data is {:?} x{} with t = {}, {} channel(s); model expects {:?} x{} with t = {}, {} channel(s)",
                self.coarse, self.factor, self.t, self.channels, cfg.coarse, cfg.factor, cfg.t, cfg.channels
            )));
        }
        Ok(())
    }

    pub fn batch(&self, idx: &[usize], cfg: &ArchConfig, scaler: &Scaler, bounds: &CoordBounds) -> Batch {
        let n = idx.len();
        let [h, w] = self.coarse;
        let [hf, wf] = self.fine();
        let c = self.channels;
        let frame_len = c * h * w;
        let frames = (0..self.t)
            .map(|f| {
                let data = idx
                    .iter()
                    .flat_map(|&i| self.inputs[i][f * frame_len..(f + 1) * frame_len].iter().map(|&v| scaler.apply(v)))
                    .collect();
                Tensor::new(vec![n, c, h, w], data).expect("frame layout")
            })
            .collect();
        let stack = |src: &Vec<Vec<f64>>| {
            let data = idx.iter().flat_map(|&i| src[i].iter().map(|&v| scaler.apply(v))).collect();
            Tensor::new(vec![n, 1, hf, wf], data).expect("fine layout")
        };
        let patch = if cfg.patch > 0 && h % cfg.patch == 0 && w % cfg.patch == 0 { cfg.patch } else { 1 };
        let centres: Vec<f64> =
            self.patch_centres(patch).iter().flat_map(|&[la, lo]| bounds.normalize(la, lo)).collect();
        let tokens = centres.len() / 2;
        let coords = Tensor::new(vec![n * tokens, 2], (0..n).flat_map(|_| centres.iter().copied()).collect()).expect("coords");
        Batch { frames, baseline: stack(&self.baselines), target: stack(&self.targets), coords, n }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_and_shapes() {
        let (coarse, fine) = benchmark_pair(10, 3, 2.0, 0.0, 1).unwrap();
        let ds = build_dataset(&[&coarse], &fine, 3).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.factor, 4);
        assert_eq!(ds.inputs[0].len(), 3 * 16 * 16);
        // Last frame of window k is day k + t - 1.
        assert_eq!(&ds.inputs[4][2 * 256..], coarse.slice(6));
        assert_eq!(ds.targets[4], fine.slice(6));
        let cfg = ArchConfig { t: 3, ..ArchConfig::default() };
        let sc = ds.fit_scaler(&[0, 1, 2]);
        let b = ds.batch(&[1, 4], &cfg, &sc, &ds.coord_bounds(4));
        assert_eq!(b.frames.len(), 3);
        assert_eq!(b.frames[0].shape(), &[2, 1, 16, 16]);
        assert_eq!(b.target.shape(), &[2, 1, 64, 64]);
        assert_eq!(b.coords.shape(), &[2 * 16, 2]);
        let cs = b.coords.data();
        assert!(cs.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!((cs[0], cs[1]), (-1.0, -1.0));
        assert_eq!((cs[30], cs[31]), (1.0, 1.0));
    }

    #[test]
    fn scaler_round_trip() {
        let s = Scaler::fit(&[1.0, 3.0]);
        assert_eq!((s.mean, s.sd), (2.0, 1.0));
        assert_eq!(s.inverse(s.apply(7.5)), 7.5);
        assert_eq!(Scaler::fit(&[4.0, 4.0]).sd, 1.0);
    }

    #[test]
    fn split_partitions() {
        let s = Split::random(200, 0.15, 0.15, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 30, 30));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(s, Split::random(200, 0.15, 0.15, 3));
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let (coarse, fine) = benchmark_pair(5, 2, 0.0, 0.0, 1).unwrap();
        assert!(build_dataset(&[&coarse], &fine, 10).is_err());
        assert!(build_dataset(&[&fine], &fine, 2).is_err());
    }
}
