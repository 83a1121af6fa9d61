//! Matching-cost volumes built from a left/right feature pair.
//!
//! For disparity hypothesis `d` at pixel `(y, x)` the left feature at `x` is
//! compared with the right feature at `x - d`. Hypotheses with `x - d < 0`
//! are out of frame: their mask bit is cleared and the slot holds the method's
//! worst value (cosine `-1`, L2 twice the largest in-frame distance, zeros for
//! the concatenation variants).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{l2_normalize_channels, Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-8;

/// A per-image `[C, H, W]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real = f32> {
    data: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        data.dims3("feature map")?;
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            data: self.data.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostMethod {
    Cosine,
    L2,
    Concat,
    NConcat,
}

impl CostMethod {
    pub const ALL: [CostMethod; 4] = [Self::Cosine, Self::L2, Self::Concat, Self::NConcat];

    /// Channel count `K` of the volume produced from `C`-channel features.
    pub fn volume_channels(self, feature_channels: usize) -> usize {
        match self {
            Self::Cosine | Self::L2 => 1,
            Self::Concat | Self::NConcat => 2 * feature_channels,
        }
    }

    /// Whether the cost collapses features to a scalar, which is what lets a
    /// trained aggregator accept features of any width.
    pub fn is_scalar(self) -> bool {
        matches!(self, Self::Cosine | Self::L2)
    }
}

impl fmt::Display for CostMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::L2 => "l2",
            Self::Concat => "concat",
            Self::NConcat => "nconcat",
        })
    }
}

impl FromStr for CostMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(Self::Cosine),
            "l2" => Ok(Self::L2),
            "concat" => Ok(Self::Concat),
            "nconcat" | "n_concat" => Ok(Self::NConcat),
            _ => Err(Error::Config(format!("unknown cost method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostOptions {
    pub eps: f64,
    /// Emit squared L2 distances instead of distances.
    pub squared_l2: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            squared_l2: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CostVolume<T: Real = f32> {
    data: Tensor<T>,
    method: CostMethod,
    valid: Vec<bool>,
    /// Flat `[D, H, W]` index of the largest in-frame L2 entry; the
    /// out-of-frame fill value is derived from it.
    l2_fill_source: Option<usize>,
}

impl<T: Real> CostVolume<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    /// Flat `[D, H, W]` index of the in-frame entry the L2 fill copies.
    pub fn l2_fill_source(&self) -> Option<usize> {
        self.l2_fill_source
    }

    pub fn method(&self) -> CostMethod {
        self.method
    }

    /// `[D, H, W]` in-frame mask, row-major.
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn disparities(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn d_max(&self) -> usize {
        self.disparities() - 1
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

/// The in-frame mask for a `[D, H, W]` volume: `x - d >= 0`.
pub fn hypothesis_mask(disparities: usize, height: usize, width: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(disparities * height * width);
    for d in 0..disparities {
        for _ in 0..height {
            m.extend((0..width).map(|x| x >= d));
        }
    }
    m
}

fn check_pair<T: Real>(
    left: &FeatureMap<T>,
    right: &FeatureMap<T>,
    d_max: usize,
    eps: f64,
) -> Result<()> {
    if left.tensor().shape() != right.tensor().shape() {
        return Err(Error::shape(format!(
            "left {:?} vs right {:?}",
            left.tensor().shape(),
            right.tensor().shape()
        )));
    }
    if d_max >= left.width() {
        return Err(Error::DisparityOutOfRange {
            d_max,
            width: left.width(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

fn pixel_norms<T: Real>(f: &Tensor<T>) -> Vec<T> {
    let (c, plane) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    let x = f.data();
    (0..plane)
        .map(|p| {
            let mut s = T::zero();
            for ch in 0..c {
                s += x[ch * plane + p] * x[ch * plane + p];
            }
            s.sqrt()
        })
        .collect()
}

pub fn build_cost<T: Real>(
    left: &FeatureMap<T>,
    right: &FeatureMap<T>,
    d_max: usize,
    method: CostMethod,
    opts: &CostOptions,
) -> Result<CostVolume<T>> {
    check_pair(left, right, d_max, opts.eps)?;
    let (c, h, w) = (left.channels(), left.height(), left.width());
    let nd = d_max + 1;
    let valid = hypothesis_mask(nd, h, w);
    let plane = h * w;
    let eps = T::of(opts.eps);
    let mut l2_fill_source = None;

    let data = match method {
        CostMethod::Cosine => {
            let nl = l2_normalize_channels(left.tensor(), eps)?;
            let nr = l2_normalize_channels(right.tensor(), eps)?;
            let (a, b) = (nl.data(), nr.data());
            let mut out = vec![-T::one(); nd * plane];
            for d in 0..nd {
                for y in 0..h {
                    for x in d..w {
                        let (pl, pr) = (y * w + x, y * w + x - d);
                        let mut s = T::zero();
                        for ch in 0..c {
                            s += a[ch * plane + pl] * b[ch * plane + pr];
                        }
                        out[(d * h + y) * w + x] = s.max(-T::one()).min(T::one());
                    }
                }
            }
            out
        }
        CostMethod::L2 => {
            let (a, b) = (left.tensor().data(), right.tensor().data());
            let mut out = vec![T::zero(); nd * plane];
            let mut best: Option<(usize, T)> = None;
            for d in 0..nd {
                for y in 0..h {
                    for x in d..w {
                        let (pl, pr) = (y * w + x, y * w + x - d);
                        let mut s = T::zero();
                        for ch in 0..c {
                            let e = a[ch * plane + pl] - b[ch * plane + pr];
                            s += e * e;
                        }
                        let v = if opts.squared_l2 { s } else { s.sqrt() };
                        let i = (d * h + y) * w + x;
                        out[i] = v;
                        if best.is_none_or(|(_, m)| v > m) {
                            best = Some((i, v));
                        }
                    }
                }
            }
            // d = 0 is always in frame, so `best` exists
            let (src, max) = best.expect("d=0 hypotheses are always valid");
            l2_fill_source = Some(src);
            let fill = max + max;
            for (v, &ok) in out.iter_mut().zip(&valid) {
                if !ok {
                    *v = fill;
                }
            }
            out
        }
        CostMethod::Concat | CostMethod::NConcat => {
            let (lt, rt);
            let (a, b) = if method == CostMethod::NConcat {
                lt = l2_normalize_channels(left.tensor(), eps)?;
                rt = l2_normalize_channels(right.tensor(), eps)?;
                (lt.data(), rt.data())
            } else {
                (left.tensor().data(), right.tensor().data())
            };
            let vol = nd * plane;
            let mut out = vec![T::zero(); 2 * c * vol];
            for ch in 0..c {
                for d in 0..nd {
                    for y in 0..h {
                        for x in d..w {
                            let i = (d * h + y) * w + x;
                            out[ch * vol + i] = a[ch * plane + y * w + x];
                            out[(c + ch) * vol + i] = b[ch * plane + y * w + x - d];
                        }
                    }
                }
            }
            out
        }
    };
    let k = method.volume_channels(c);
    Ok(CostVolume {
        data: Tensor::new(vec![k, nd, h, w], data)?,
        method,
        valid,
        l2_fill_source,
    })
}

/// Backpropagate through per-pixel `v / max(||v||, eps)`.
fn normalize_backward<T: Real>(x: &Tensor<T>, grad: &[T], eps: T) -> Vec<T> {
    let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let norms = pixel_norms(x);
    let v = x.data();
    let mut out = vec![T::zero(); v.len()];
    for p in 0..plane {
        let n = norms[p];
        if n < eps {
            for ch in 0..c {
                out[ch * plane + p] = grad[ch * plane + p] / eps;
            }
            continue;
        }
        let mut dot = T::zero();
        for ch in 0..c {
            dot += v[ch * plane + p] * grad[ch * plane + p];
        }
        let n2 = n * n;
        for ch in 0..c {
            let i = ch * plane + p;
            out[i] = (grad[i] - v[i] * dot / n2) / n;
        }
    }
    out
}

/// Gradients of a scalar objective with respect to the left and right features,
/// given its gradient with respect to every slot of `cv`.
pub fn cost_backward<T: Real>(
    left: &FeatureMap<T>,
    right: &FeatureMap<T>,
    cv: &CostVolume<T>,
    grad: &Tensor<T>,
    opts: &CostOptions,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if grad.shape() != cv.tensor().shape() {
        return Err(Error::shape(format!(
            "cost gradient {:?} vs volume {:?}",
            grad.shape(),
            cv.tensor().shape()
        )));
    }
    let (c, h, w) = (left.channels(), left.height(), left.width());
    let nd = cv.disparities();
    let plane = h * w;
    let eps = T::of(opts.eps);
    let g = grad.data();
    let mut dl = vec![T::zero(); c * plane];
    let mut dr = vec![T::zero(); c * plane];

    match cv.method {
        CostMethod::Cosine => {
            let (lt, rt) = (left.tensor(), right.tensor());
            let nl = l2_normalize_channels(lt, eps)?;
            let nr = l2_normalize_channels(rt, eps)?;
            let (ln, rn) = (pixel_norms(lt), pixel_norms(rt));
            let (a, b) = (nl.data(), nr.data());
            let cost = cv.tensor().data();
            for d in 0..nd {
                for y in 0..h {
                    for x in d..w {
                        let i = (d * h + y) * w + x;
                        let gi = g[i];
                        if gi == T::zero() {
                            continue;
                        }
                        let (pl, pr) = (y * w + x, y * w + x - d);
                        let cval = cost[i];
                        let (nlv, nrv) = (ln[pl], rn[pr]);
                        for ch in 0..c {
                            let (ai, bi) = (a[ch * plane + pl], b[ch * plane + pr]);
                            dl[ch * plane + pl] += if nlv < eps {
                                gi * bi / eps
                            } else {
                                gi * (bi - cval * ai) / nlv
                            };
                            dr[ch * plane + pr] += if nrv < eps {
                                gi * ai / eps
                            } else {
                                gi * (ai - cval * bi) / nrv
                            };
                        }
                    }
                }
            }
        }
        CostMethod::L2 => {
            let (a, b) = (left.tensor().data(), right.tensor().data());
            let cost = cv.tensor().data();
            let mut g = g.to_vec();
            // out-of-frame slots hold 2 * max, so their gradient lands on the max slot
            if let Some(src) = cv.l2_fill_source {
                let mut acc = T::zero();
                for (gi, &ok) in g.iter().zip(&cv.valid) {
                    if !ok {
                        acc += *gi;
                    }
                }
                g[src] += acc + acc;
            }
            for d in 0..nd {
                for y in 0..h {
                    for x in d..w {
                        let i = (d * h + y) * w + x;
                        let gi = g[i];
                        if gi == T::zero() {
                            continue;
                        }
                        let (pl, pr) = (y * w + x, y * w + x - d);
                        let scale = if opts.squared_l2 {
                            gi + gi
                        } else if cost[i] > T::zero() {
                            gi / cost[i]
                        } else {
                            T::zero()
                        };
                        for ch in 0..c {
                            let e = a[ch * plane + pl] - b[ch * plane + pr];
                            dl[ch * plane + pl] += scale * e;
                            dr[ch * plane + pr] -= scale * e;
                        }
                    }
                }
            }
        }
        CostMethod::Concat | CostMethod::NConcat => {
            let vol = nd * plane;
            for ch in 0..c {
                for d in 0..nd {
                    for y in 0..h {
                        for x in d..w {
                            let i = (d * h + y) * w + x;
                            dl[ch * plane + y * w + x] += g[ch * vol + i];
                            dr[ch * plane + y * w + x - d] += g[(c + ch) * vol + i];
                        }
                    }
                }
            }
            if cv.method == CostMethod::NConcat {
                dl = normalize_backward(left.tensor(), &dl, eps);
                dr = normalize_backward(right.tensor(), &dr, eps);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, h, w], dl)?,
        Tensor::new(vec![c, h, w], dr)?,
    ))
}
