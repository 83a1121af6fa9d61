//! Synthetic stereo pairs, evaluation metrics, and a brute-force matcher used
//! as an independent reference.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cost::FeatureMap;
use crate::error::{Error, Result};
use crate::head::DisparityMap;
use crate::io::{read_pfm, read_pgm, write_pfm, write_pgm, KvFile};
use crate::nets::{init_params, FeatureDesc, NetDescriptor, Program};
use crate::pipeline::StereoSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisparityField {
    Constant(f64),
    /// `d1` left of column `split`, `d2` from it on.
    TwoPlane { d1: f64, d2: f64, split: usize },
    /// `a·x + b·y + c`.
    SlantedPlane { a: f64, b: f64, c: f64 },
}

impl DisparityField {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        match *self {
            Self::Constant(d) => d,
            Self::TwoPlane { d1, d2, split } => {
                if x < split {
                    d1
                } else {
                    d2
                }
            }
            Self::SlantedPlane { a, b, c } => a * x as f64 + b * y as f64 + c,
        }
    }
}

impl fmt::Display for DisparityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(d) => write!(f, "constant:d={d}"),
            Self::TwoPlane { d1, d2, split } => write!(f, "twoplane:d1={d1},d2={d2},split={split}"),
            Self::SlantedPlane { a, b, c } => write!(f, "slanted:a={a},b={b},c={c}"),
        }
    }
}

/// Parses `constant:d=3`, `twoplane:d1=2,d2=5,split=24`, `slanted:a=0.1,b=0,c=2`.
impl FromStr for DisparityField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad disparity field {s:?}"));
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = KvFile::new();
        for part in args.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            kv.set(k.trim(), v.trim());
        }
        let num = |k: &str| -> Result<f64> { kv.parse_key(k)?.ok_or_else(bad) };
        match kind.trim() {
            "constant" => Ok(Self::Constant(num("d")?)),
            "twoplane" => Ok(Self::TwoPlane {
                d1: num("d1")?,
                d2: num("d2")?,
                split: kv.parse_key("split")?.ok_or_else(bad)?,
            }),
            "slanted" => Ok(Self::SlantedPlane {
                a: num("a")?,
                b: num("b")?,
                c: num("c")?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub field: DisparityField,
    /// Fraction of pixels carrying a random dot; the rest are black.
    pub density: f64,
    /// Standard deviation of Gaussian noise added to both images.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(height: usize, width: usize, field: DisparityField) -> Self {
        Self {
            height,
            width,
            field,
            density: 1.0,
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn dot(rng: &mut ChaCha8Rng, density: f64) -> f32 {
    // quantized to 8 bits so pairs survive a PGM round trip unchanged
    if density >= 1.0 || rng.random::<f64>() < density {
        rng.random::<u8>() as f32 / 255.0
    } else {
        0.0
    }
}

/// A random-dot right image and a left image warped from it by the field,
/// `left(x, y) = right(x - D(x, y), y)`. Pixels whose match falls outside the
/// right image, or is hidden behind a nearer surface, are masked out and
/// filled with fresh texture.
pub fn gen_pair(spec: &SyntheticSpec) -> Result<StereoSample> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        return Err(Error::Config("synthetic image must be non-empty".into()));
    }
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(Error::Config(format!("texture density {} not in (0, 1]", spec.density)));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("noise {} must be non-negative", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let right: Vec<f32> = (0..h * w).map(|_| dot(&mut rng, spec.density)).collect();
    let mut left = vec![0.0f32; h * w];
    let mut gt = vec![0.0f32; h * w];
    let mut mask = vec![false; h * w];

    for y in 0..h {
        let disp: Vec<f64> = (0..w).map(|x| spec.field.at(x, y)).collect();
        if let Some(d) = disp.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(Error::Config(format!("disparity {d} must be non-negative")));
        }
        // largest disparity landing on each right-image column; it hides the rest
        let mut zbuf = vec![f64::NEG_INFINITY; w];
        for (x, &d) in disp.iter().enumerate() {
            let xr = x as f64 - d;
            if xr >= 0.0 {
                let c = xr.round() as usize;
                zbuf[c] = zbuf[c].max(d);
            }
        }
        let row = &right[y * w..(y + 1) * w];
        for (x, &d) in disp.iter().enumerate() {
            let i = y * w + x;
            gt[i] = d as f32;
            let xr = x as f64 - d;
            let visible = xr >= 0.0 && d >= zbuf[xr.round() as usize] - 0.5;
            if !visible {
                left[i] = dot(&mut rng, spec.density);
                continue;
            }
            mask[i] = true;
            let x0 = xr.floor() as usize;
            let t = (xr - x0 as f64) as f32;
            left[i] = if t == 0.0 {
                row[x0]
            } else {
                row[x0] * (1.0 - t) + row[(x0 + 1).min(w - 1)] * t
            };
        }
    }

    let mut right = right;
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in left.iter_mut().chain(right.iter_mut()) {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    StereoSample::new(
        format!("s{:05}", spec.seed),
        Tensor::new(vec![1, h, w], left)?,
        Tensor::new(vec![1, h, w], right)?,
        DisparityMap::new(Tensor::new(vec![h, w], gt)?, mask)?,
    )
}

fn common_pixels(pred: &DisparityMap, gt: &DisparityMap) -> Result<Vec<usize>> {
    if pred.values().shape() != gt.values().shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.values().shape(),
            gt.values().shape()
        )));
    }
    let px: Vec<usize> = (0..gt.mask().len())
        .filter(|&i| pred.mask()[i] && gt.mask()[i])
        .collect();
    if px.is_empty() {
        Err(Error::EmptyMask)
    } else {
        Ok(px)
    }
}

/// Mean absolute error over pixels valid in both maps.
pub fn epe(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    let px = common_pixels(pred, gt)?;
    let (p, g) = (pred.values().data(), gt.values().data());
    let sum: f64 = px.iter().map(|&i| (p[i] as f64 - g[i] as f64).abs()).sum();
    Ok(sum / px.len() as f64)
}

/// Fraction of pixels valid in both maps whose error strictly exceeds `tau`.
pub fn error_rate(pred: &DisparityMap, gt: &DisparityMap, tau: f64) -> Result<f64> {
    let px = common_pixels(pred, gt)?;
    let (p, g) = (pred.values().data(), gt.values().data());
    let bad = px
        .iter()
        .filter(|&&i| (p[i] as f64 - g[i] as f64).abs() > tau)
        .count();
    Ok(bad as f64 / px.len() as f64)
}

fn plane(image: &Tensor) -> Result<(usize, usize, &[f32])> {
    match image.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w, image.data())),
        s => Err(Error::shape(format!("expected a single-channel image, got {s:?}"))),
    }
}

/// Winner-take-all block matching by zero-mean normalized cross-correlation
/// on single-channel images. Windows are clipped to the columns where both
/// the left pixel and its match exist, so every `d ≤ min(x, d_max)` is
/// scored. Pixels with a flat window get no estimate.
pub fn zncc_oracle(left: &Tensor, right: &Tensor, window: usize, d_max: usize) -> Result<DisparityMap> {
    let (h, w, l) = plane(left)?;
    let (rh, rw, r) = plane(right)?;
    if (h, w) != (rh, rw) {
        return Err(Error::shape("left and right images differ in size"));
    }
    if window.is_multiple_of(2) {
        return Err(Error::Config(format!("window {window} must be odd")));
    }
    let k = window / 2;
    let mut values = vec![0.0f32; h * w];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        let rows = y.saturating_sub(k)..(y + k + 1).min(h);
        for x in 0..w {
            let mut best: Option<(usize, f64)> = None;
            for d in 0..=d_max.min(x) {
                let cols = x.saturating_sub(k).max(d)..(x + k + 1).min(w);
                let mut acc = [0.0f64; 5];
                for yy in rows.clone() {
                    for xx in cols.clone() {
                        let a = l[yy * w + xx] as f64;
                        let b = r[yy * w + xx - d] as f64;
                        acc[0] += a;
                        acc[1] += b;
                        acc[2] += a * a;
                        acc[3] += b * b;
                        acc[4] += a * b;
                    }
                }
                let n = (rows.len() * cols.len()) as f64;
                let (ma, mb) = (acc[0] / n, acc[1] / n);
                let va = acc[2] / n - ma * ma;
                let vb = acc[3] / n - mb * mb;
                if va < 1e-12 || vb < 1e-12 {
                    continue;
                }
                let score = (acc[4] / n - ma * mb) / (va * vb).sqrt();
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((d, score));
                }
            }
            if let Some((d, _)) = best {
                values[y * w + x] = d as f32;
                mask[y * w + x] = true;
            }
        }
    }
    DisparityMap::new(Tensor::new(vec![h, w], values)?, mask)
}

/// Mean over a `(2r+1)²` window clipped to the map, per channel.
pub fn box_blur(f: &FeatureMap, radius: usize) -> Result<FeatureMap> {
    if radius == 0 {
        return Ok(f.clone());
    }
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let src = f.tensor().data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
                let mut s = 0.0f32;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        s += p[yy * w + xx];
                    }
                }
                out[ch * h * w + y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
            }
        }
    }
    FeatureMap::new(Tensor::new(vec![c, h, w], out)?)
}

/// Stand-in for an externally computed feature: an untrained feature network
/// drawn from `seed`, optionally box-blurred to wash out fine detail.
pub fn fixture_features(image: &Tensor, channels: usize, seed: u64, blur: usize) -> Result<FeatureMap> {
    let desc = NetDescriptor::Feature(FeatureDesc {
        in_channels: image.dims3("image")?[0],
        width: 8,
        out_channels: channels,
    });
    let p = init_params::<f32>(desc, seed)?;
    let t = Program::for_descriptor(&desc).run(&p, image.clone())?;
    box_blur(&FeatureMap::new(t.output().clone())?, blur)
}

/// A two-plane field with both disparities whole multiples of `step`, at most
/// `max_steps · step`, split at a random column away from the borders.
pub fn random_field(seed: u64, width: usize, step: usize, max_steps: usize) -> DisparityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
    let mut d = || (rng.random_range(0..=max_steps) * step) as f64;
    let (d1, d2) = (d(), d());
    let split = rng.random_range(width / 4..=(3 * width / 4).max(width / 4));
    DisparityField::TwoPlane { d1, d2, split }
}

/// `count` pairs with random two-plane fields, seeds `seed..seed + count`.
pub fn toy_dataset(
    count: usize,
    height: usize,
    width: usize,
    step: usize,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<StereoSample>> {
    (0..count as u64)
        .map(|i| {
            let s = seed + i;
            gen_pair(&SyntheticSpec::new(height, width, random_field(s, width, step, max_steps)).with_seed(s))
        })
        .collect()
}

pub fn sample_paths(dir: &Path, id: &str) -> [std::path::PathBuf; 4] {
    ["left.pgm", "right.pgm", "gt.pfm", "mask.pgm"].map(|s| dir.join(format!("{id}_{s}")))
}

/// Writes `{id}_left.pgm`, `{id}_right.pgm`, `{id}_gt.pfm`, `{id}_mask.pgm`.
pub fn write_sample(dir: impl AsRef<Path>, sample: &StereoSample) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [l, r, g, m] = sample_paths(dir, &sample.id);
    write_pgm(&sample.left, l)?;
    write_pgm(&sample.right, r)?;
    write_pfm(&sample.gt, g)?;
    let mask: Vec<f32> = sample.gt.mask().iter().map(|&v| v as u8 as f32).collect();
    write_pgm(&Tensor::new(vec![sample.height(), sample.width()], mask)?, m)
}

pub fn read_sample(dir: impl AsRef<Path>, id: &str) -> Result<StereoSample> {
    let [l, r, g, m] = sample_paths(dir.as_ref(), id);
    let gt = read_pfm(g)?;
    let stored = read_pgm(m)?;
    if stored.len() != gt.mask().len() {
        return Err(Error::Format(format!("{id}: mask size differs from ground truth")));
    }
    let mask = gt
        .mask()
        .iter()
        .zip(stored.data())
        .map(|(&finite, &v)| finite && v > 0.5)
        .collect();
    StereoSample::new(id, read_pgm(l)?, read_pgm(r)?, gt.with_mask(mask)?)
}

/// Sample ids in `dir`, sorted, found by their `_left.pgm` files.
pub fn list_samples(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_left.pgm"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<StereoSample>> {
    let dir = dir.as_ref();
    list_samples(dir)?.iter().map(|id| read_sample(dir, id)).collect()
}
