//! From aggregated scores to disparities, plus the training losses.
//!
//! Scores over hypotheses go through a masked, temperature-scaled softmax;
//! the disparity is the probability-weighted mean hypothesis. Training
//! combines a cross entropy against a Laplacian-shaped target distribution
//! with a smooth-L1 term on the regressed disparity.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CE_LOG_EPS: f64 = 1e-12;
pub const DEFAULT_MU: f64 = 0.1;
pub const DEFAULT_LAPLACE_SCALE: f64 = 1.0;

/// Per-pixel distribution over disparity hypotheses, `[D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume<T: Real = f32> {
    data: Tensor<T>,
    /// `[H, W]`; false marks a don't-care pixel that losses skip.
    defined: Vec<bool>,
}

impl<T: Real> ProbVolume<T> {
    /// Wraps an already-normalized `[D, H, W]` tensor with every pixel defined.
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let [_, h, w] = data.dims3("prob volume")?;
        Ok(Self {
            data,
            defined: vec![true; h * w],
        })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn defined(&self) -> &[bool] {
        &self.defined
    }

    pub fn disparities(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Zero out hypotheses where `valid` (`[D, H, W]`) is false and
    /// renormalize each pixel over what remains.
    pub fn restrict_to(&self, valid: &[bool]) -> Result<Self> {
        let (nd, plane) = (self.disparities(), self.height() * self.width());
        if valid.len() != nd * plane {
            return Err(Error::shape("hypothesis mask does not match volume"));
        }
        let mut out = self.data.clone();
        let v = out.data_mut();
        for p in 0..plane {
            let mut s = T::zero();
            for d in 0..nd {
                let i = d * plane + p;
                if !valid[i] {
                    v[i] = T::zero();
                }
                s += v[i];
            }
            if s > T::zero() {
                for d in 0..nd {
                    v[d * plane + p] /= s;
                }
            }
        }
        Ok(Self {
            data: out,
            defined: self.defined.clone(),
        })
    }
}

/// A disparity map in pixels with a validity mask, both `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap<T: Real = f32> {
    values: Tensor<T>,
    mask: Vec<bool>,
}

impl<T: Real> DisparityMap<T> {
    pub fn new(values: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        let [h, w] = values.dims2("disparity map")?;
        if mask.len() != h * w {
            return Err(Error::shape(format!(
                "mask has {} entries for a {h}x{w} map",
                mask.len()
            )));
        }
        Ok(Self { values, mask })
    }

    pub fn fully_valid(values: Tensor<T>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![true; n])
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::shape("replacement mask has the wrong size"));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> DisparityMap<U> {
        DisparityMap {
            values: self.values.cast(),
            mask: self.mask.clone(),
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(t))
    }
}

/// Softmax of `scores / temperature` over the disparity axis; hypotheses with
/// `valid == false` get probability zero.
pub fn softmax_over_disparity<T: Real>(
    scores: &Tensor<T>,
    temperature: f64,
    valid: &[bool],
) -> Result<ProbVolume<T>> {
    check_temperature(temperature)?;
    let [nd, h, w] = scores.dims3("scores")?;
    let plane = h * w;
    if valid.len() != nd * plane {
        return Err(Error::shape("hypothesis mask does not match scores"));
    }
    let inv_t = T::of(1.0 / temperature);
    let s = scores.data();
    let mut out = vec![T::zero(); s.len()];
    for p in 0..plane {
        let mut m = T::neg_infinity();
        for d in 0..nd {
            let i = d * plane + p;
            if valid[i] {
                m = m.max(s[i] * inv_t);
            }
        }
        if m == T::neg_infinity() {
            return Err(Error::shape("pixel with no valid hypothesis"));
        }
        let mut sum = T::zero();
        for d in 0..nd {
            let i = d * plane + p;
            if valid[i] {
                let e = (s[i] * inv_t - m).exp();
                out[i] = e;
                sum += e;
            }
        }
        for d in 0..nd {
            out[d * plane + p] /= sum;
        }
    }
    ProbVolume::new(Tensor::new(vec![nd, h, w], out)?)
}

/// Gradient with respect to the scores given the gradient with respect to the
/// probabilities produced by [`softmax_over_disparity`].
pub fn softmax_backward<T: Real>(
    prob: &ProbVolume<T>,
    grad_prob: &Tensor<T>,
    temperature: f64,
) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    if grad_prob.shape() != prob.tensor().shape() {
        return Err(Error::shape("softmax upstream gradient shape"));
    }
    let (nd, plane) = (prob.disparities(), prob.height() * prob.width());
    let (p, g) = (prob.tensor().data(), grad_prob.data());
    let inv_t = T::of(1.0 / temperature);
    let mut out = vec![T::zero(); p.len()];
    for px in 0..plane {
        let mut dot = T::zero();
        for d in 0..nd {
            let i = d * plane + px;
            dot += p[i] * g[i];
        }
        for d in 0..nd {
            let i = d * plane + px;
            out[i] = p[i] * (g[i] - dot) * inv_t;
        }
    }
    Tensor::new(prob.tensor().shape().to_vec(), out)
}

/// Probability-weighted mean hypothesis at each pixel.
pub fn regress_disparity<T: Real>(p: &ProbVolume<T>) -> Result<DisparityMap<T>> {
    let (nd, h, w) = (p.disparities(), p.height(), p.width());
    let plane = h * w;
    let v = p.tensor().data();
    let mut out = vec![T::zero(); plane];
    for (px, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for d in 0..nd {
            acc += T::of(d as f64) * v[d * plane + px];
        }
        *o = acc;
    }
    DisparityMap::fully_valid(Tensor::new(vec![h, w], out)?)
}

pub fn regress_backward<T: Real>(nd: usize, grad_disp: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w] = grad_disp.dims2("disparity gradient")?;
    let plane = h * w;
    let g = grad_disp.data();
    let mut out = vec![T::zero(); nd * plane];
    for d in 0..nd {
        let dv = T::of(d as f64);
        for px in 0..plane {
            out[d * plane + px] = dv * g[px];
        }
    }
    Tensor::new(vec![nd, h, w], out)
}

/// `P(d) ∝ exp(-|d - D| / b)` over `d = 0..=d_max` at every masked pixel.
/// Unmasked pixels get a uniform distribution flagged as don't-care.
pub fn laplacian_target<T: Real>(
    gt: &DisparityMap<T>,
    b: f64,
    d_max: usize,
) -> Result<ProbVolume<T>> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::NonPositiveScale(b));
    }
    let (h, w) = (gt.height(), gt.width());
    let (nd, plane) = (d_max + 1, h * w);
    let g = gt.values().data();
    let mut out = vec![T::zero(); nd * plane];
    let uniform = T::of(1.0 / nd as f64);
    for px in 0..plane {
        if !gt.mask()[px] || !g[px].is_finite() {
            for d in 0..nd {
                out[d * plane + px] = uniform;
            }
            continue;
        }
        let center = g[px].as_f64();
        // subtract the smallest exponent so the peak entry is exp(0)
        let nearest = center.round().clamp(0.0, d_max as f64);
        let floor = (nearest - center).abs() / b;
        let mut sum = 0.0f64;
        let mut tmp = vec![0.0f64; nd];
        for (d, t) in tmp.iter_mut().enumerate() {
            *t = (-((d as f64 - center).abs() / b - floor)).exp();
            sum += *t;
        }
        for d in 0..nd {
            out[d * plane + px] = T::of(tmp[d] / sum);
        }
    }
    Ok(ProbVolume {
        data: Tensor::new(vec![nd, h, w], out)?,
        defined: gt.mask().to_vec(),
    })
}

/// Which side of the cross entropy carries the logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CeOrientation {
    /// `-Σ P_target · log P_pred`, minimized by `P_pred = P_target`.
    #[default]
    Standard,
    /// `-Σ P_pred · log P_target`, the log on the target distribution.
    Literal,
}

impl fmt::Display for CeOrientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Literal => "literal",
        })
    }
}

impl FromStr for CeOrientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Config(format!("unknown cross-entropy orientation {s:?}"))),
        }
    }
}

fn loss_pixels(mask: &[bool], defined: &[bool]) -> Result<Vec<usize>> {
    let px: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] && defined[i]).collect();
    if px.is_empty() {
        Err(Error::EmptyMask)
    } else {
        Ok(px)
    }
}

fn check_same<T: Real>(a: &ProbVolume<T>, b: &ProbVolume<T>, mask: &[bool]) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    if mask.len() != a.height() * a.width() {
        return Err(Error::shape("loss mask does not match volume"));
    }
    Ok(())
}

pub fn cross_entropy_loss<T: Real>(
    pred: &ProbVolume<T>,
    target: &ProbVolume<T>,
    mask: &[bool],
    orientation: CeOrientation,
) -> Result<T> {
    check_same(pred, target, mask)?;
    let px = loss_pixels(mask, target.defined())?;
    let (nd, plane) = (pred.disparities(), mask.len());
    let (p, q) = (pred.tensor().data(), target.tensor().data());
    let eps = T::of(CE_LOG_EPS);
    let mut total = T::zero();
    for &i in &px {
        for d in 0..nd {
            let k = d * plane + i;
            total += match orientation {
                CeOrientation::Standard => -q[k] * (p[k] + eps).ln(),
                CeOrientation::Literal => -p[k] * (q[k] + eps).ln(),
            };
        }
    }
    Ok(total / T::of(px.len() as f64))
}

pub fn cross_entropy_backward<T: Real>(
    pred: &ProbVolume<T>,
    target: &ProbVolume<T>,
    mask: &[bool],
    orientation: CeOrientation,
) -> Result<Tensor<T>> {
    check_same(pred, target, mask)?;
    let px = loss_pixels(mask, target.defined())?;
    let (nd, plane) = (pred.disparities(), mask.len());
    let (p, q) = (pred.tensor().data(), target.tensor().data());
    let eps = T::of(CE_LOG_EPS);
    let n = T::of(px.len() as f64);
    let mut out = vec![T::zero(); p.len()];
    for &i in &px {
        for d in 0..nd {
            let k = d * plane + i;
            out[k] = match orientation {
                CeOrientation::Standard => -q[k] / (p[k] + eps) / n,
                CeOrientation::Literal => -(q[k] + eps).ln() / n,
            };
        }
    }
    Tensor::new(pred.tensor().shape().to_vec(), out)
}

fn smooth_l1<T: Real>(e: T) -> T {
    let a = e.abs();
    if a < T::one() {
        T::of(0.5) * e * e
    } else {
        a - T::of(0.5)
    }
}

fn l1_pixels<T: Real>(pred: &DisparityMap<T>, gt: &DisparityMap<T>, mask: &[bool]) -> Result<Vec<usize>> {
    if pred.values().shape() != gt.values().shape() || mask.len() != pred.mask().len() {
        return Err(Error::shape("smooth-L1 operands differ in shape"));
    }
    let px: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] && gt.mask()[i]).collect();
    if px.is_empty() {
        Err(Error::EmptyMask)
    } else {
        Ok(px)
    }
}

/// Mean over masked pixels of `0.5 e²` for `|e| < 1`, else `|e| - 0.5`.
pub fn smooth_l1_loss<T: Real>(
    pred: &DisparityMap<T>,
    gt: &DisparityMap<T>,
    mask: &[bool],
) -> Result<T> {
    let px = l1_pixels(pred, gt, mask)?;
    let (p, g) = (pred.values().data(), gt.values().data());
    let mut total = T::zero();
    for &i in &px {
        total += smooth_l1(p[i] - g[i]);
    }
    Ok(total / T::of(px.len() as f64))
}

pub fn smooth_l1_backward<T: Real>(
    pred: &DisparityMap<T>,
    gt: &DisparityMap<T>,
    mask: &[bool],
) -> Result<Tensor<T>> {
    let px = l1_pixels(pred, gt, mask)?;
    let (p, g) = (pred.values().data(), gt.values().data());
    let n = T::of(px.len() as f64);
    let mut out = vec![T::zero(); p.len()];
    for &i in &px {
        let e = p[i] - g[i];
        out[i] = if e.abs() < T::one() { e } else { e.signum() } / n;
    }
    Tensor::new(pred.values().shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown<T: Real = f32> {
    pub total: T,
    /// `Σ λ_m · L_ce,m`
    pub ce: T,
    /// `Σ λ_m · L_sm,m`
    pub sl1: T,
}

/// Per-output loss terms, one entry per disparity output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputLoss<T: Real = f32> {
    pub ce: T,
    pub sl1: T,
}

/// `Σ_m λ_m (L_ce,m + μ L_sm,m)` from precomputed per-output terms.
pub fn combine_losses<T: Real>(
    terms: &[OutputLoss<T>],
    lambdas: &[f64],
    mu: f64,
) -> Result<LossBreakdown<T>> {
    if terms.is_empty() || terms.len() != lambdas.len() {
        return Err(Error::Config(format!(
            "{} outputs but {} loss weights",
            terms.len(),
            lambdas.len()
        )));
    }
    let mut out = LossBreakdown::default();
    for (t, &l) in terms.iter().zip(lambdas) {
        let l = T::of(l);
        out.total += l * (t.ce + T::of(mu) * t.sl1);
        out.ce += l * t.ce;
        out.sl1 += l * t.sl1;
    }
    Ok(out)
}

/// Evaluate the full multi-output training loss.
pub fn total_loss<T: Real>(
    outputs: &[(ProbVolume<T>, DisparityMap<T>)],
    targets: &(ProbVolume<T>, DisparityMap<T>),
    lambdas: &[f64],
    mu: f64,
    mask: &[bool],
    orientation: CeOrientation,
) -> Result<LossBreakdown<T>> {
    let terms = outputs
        .iter()
        .map(|(p, d)| {
            Ok(OutputLoss {
                ce: cross_entropy_loss(p, &targets.0, mask, orientation)?,
                sl1: smooth_l1_loss(d, &targets.1, mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    combine_losses(&terms, lambdas, mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(nd: usize, vals: &[f64]) -> ProbVolume<f64> {
        ProbVolume::new(Tensor::new(vec![nd, 1, vals.len() / nd], vals.to_vec()).unwrap()).unwrap()
    }

    fn dmap(vals: &[f64]) -> DisparityMap<f64> {
        DisparityMap::fully_valid(Tensor::new(vec![1, vals.len()], vals.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn softmax_spot_values() {
        let s = Tensor::new(vec![4, 1, 1], vec![50.0f64, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax_over_disparity(&s, 1.0, &[true; 4]).unwrap();
        assert!(p.tensor().data()[0] > 1.0 - 1e-12);

        let s = Tensor::new(vec![5, 1, 1], vec![0.3f64; 5]).unwrap();
        let p = softmax_over_disparity(&s, 1.0, &[true; 5]).unwrap();
        assert!(p.tensor().data().iter().all(|&v| (v - 0.2).abs() < 1e-12));

        assert!(matches!(
            softmax_over_disparity(&s, 0.0, &[true; 5]),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn softmax_masks_out_of_frame() {
        let s = Tensor::new(vec![3, 1, 1], vec![0.0f64, 9.0, 0.0]).unwrap();
        let p = softmax_over_disparity(&s, 1.0, &[true, false, true]).unwrap();
        assert_eq!(p.tensor().data()[1], 0.0);
        assert!((p.tensor().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn regression_spot_values() {
        let mut onehot = vec![0.0; 5];
        onehot[3] = 1.0;
        assert_eq!(regress_disparity(&pv(5, &onehot)).unwrap().values().data()[0], 3.0);
        assert!((regress_disparity(&pv(5, &[0.2; 5])).unwrap().values().data()[0] - 2.0).abs() < 1e-12);
        let half = [0.0, 0.0, 0.5, 0.0, 0.5];
        assert_eq!(regress_disparity(&pv(5, &half)).unwrap().values().data()[0], 3.0);
    }

    #[test]
    fn laplacian_spot_values() {
        let t = laplacian_target(&dmap(&[2.0]), 1.0, 4).unwrap();
        let p = t.tensor().data();
        assert!((p[1] - p[3]).abs() < 1e-15);
        assert!((p[0] - p[4]).abs() < 1e-15);
        // direct evaluation of exp(-|d-2|) for d = 0..4, then normalize
        let raw: Vec<f64> = (0..5).map(|d: i32| (-((d - 2).abs() as f64)).exp()).collect();
        let oracle = raw[2] / raw.iter().sum::<f64>();
        assert!((p[2] - oracle).abs() < 1e-12);
        assert!((p[2] - 0.49840).abs() < 1e-5);

        let sharp = laplacian_target(&dmap(&[3.0]), 0.01, 5).unwrap();
        for (d, &v) in sharp.tensor().data().iter().enumerate() {
            let want = if d == 3 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-4);
        }
        assert!(matches!(laplacian_target(&dmap(&[1.0]), 0.0, 3), Err(Error::NonPositiveScale(_))));
    }

    #[test]
    fn laplacian_flags_unmasked_pixels() {
        let gt = dmap(&[1.0, 2.0]).with_mask(vec![true, false]).unwrap();
        let t = laplacian_target(&gt, 1.0, 3).unwrap();
        assert_eq!(t.defined(), &[true, false]);
        let pred = pv(4, &[0.25; 8]);
        let all = cross_entropy_loss(&pred, &t, &[true, true], CeOrientation::Standard).unwrap();
        let one = cross_entropy_loss(&pred, &t, &[true, false], CeOrientation::Standard).unwrap();
        assert_eq!(all, one);
    }

    #[test]
    fn cross_entropy_spot_values() {
        let target = pv(4, &[0.0, 1.0, 0.0, 0.0]);
        let pred = pv(4, &[0.25; 4]);
        let l = cross_entropy_loss(&pred, &target, &[true], CeOrientation::Standard).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-9);
        assert!(matches!(
            cross_entropy_loss(&pred, &target, &[false], CeOrientation::Standard),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn cross_entropy_masked_mean_matches_scalar_loop() {
        let nd = 3;
        let w = 4;
        let raw_p: Vec<f64> = (0..nd * w).map(|i| 1.0 + (i * 37 % 11) as f64).collect();
        let raw_q: Vec<f64> = (0..nd * w).map(|i| 1.0 + (i * 53 % 7) as f64).collect();
        let norm = |raw: &[f64]| -> Vec<f64> {
            let mut out = raw.to_vec();
            for x in 0..w {
                let s: f64 = (0..nd).map(|d| raw[d * w + x]).sum();
                for d in 0..nd {
                    out[d * w + x] /= s;
                }
            }
            out
        };
        let (p, q) = (norm(&raw_p), norm(&raw_q));
        let mask = [true, false, true, false];
        let got = cross_entropy_loss(&pv(nd, &p), &pv(nd, &q), &mask, CeOrientation::Standard).unwrap();
        let mut want = 0.0;
        for x in [0, 2] {
            for d in 0..nd {
                want += -q[d * w + x] * (p[d * w + x] + 1e-12).ln();
            }
        }
        want /= 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_spot_values() {
        let gt = dmap(&[0.0]);
        for (e, want) in [(0.5, 0.125), (1.0, 0.5), (2.0, 1.5), (0.0, 0.0), (-2.0, 1.5)] {
            assert_eq!(smooth_l1_loss(&dmap(&[e]), &gt, &[true]).unwrap(), want);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let one = combine_losses(&[OutputLoss { ce: 1.0f64, sl1: 2.0 }], &[1.0], 0.1).unwrap();
        assert_eq!(one.total, 1.0 + 0.1 * 2.0);
        let zero = combine_losses(&[OutputLoss { ce: 1.0f64, sl1: 2.0 }; 2], &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(zero.total, 0.0);

        let (ce, sl1) = (0.8f64, 1.7f64);
        let three = combine_losses(&[OutputLoss { ce, sl1 }; 3], &[0.5, 0.7, 1.0], 0.1).unwrap();
        let mut want = 0.0;
        for l in [0.5, 0.7, 1.0] {
            want += l * (ce + 0.1 * sl1);
        }
        assert_eq!(three.total, want);
        assert!((three.total - 2.2 * ce * (1.0 + 0.1 * sl1 / ce)).abs() < 1e-12);
        assert!(combine_losses(&[OutputLoss { ce, sl1 }], &[0.5, 0.7], 0.1).is_err());
    }

    #[test]
    fn total_loss_end_to_end() {
        let pred = pv(4, &[0.25; 4]);
        let target = pv(4, &[0.0, 1.0, 0.0, 0.0]);
        let disp = regress_disparity(&pred).unwrap();
        let gt = dmap(&[1.0]);
        let l = total_loss(&[(pred, disp)], &(target, gt), &[1.0], 0.1, &[true], CeOrientation::Standard).unwrap();
        assert!((l.total - (4f64.ln() + 0.1 * 0.125)).abs() < 1e-9);
    }

    fn random_dist(seed: u64, nd: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(0x2545_f491_4f6c_dd1d) | 1;
        let raw: Vec<f64> = (0..nd)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                0.01 + (s % 1000) as f64 / 1000.0
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|v| v / sum).collect()
    }

    proptest! {
        #[test]
        fn gibbs_inequality(seed in 0u64..10_000, nd in 2usize..8) {
            let p = pv(nd, &random_dist(seed, nd));
            let q = pv(nd, &random_dist(seed + 1, nd));
            let self_ce = cross_entropy_loss(&p, &p, &[true], CeOrientation::Standard).unwrap();
            let cross = cross_entropy_loss(&q, &p, &[true], CeOrientation::Standard).unwrap();
            prop_assert!(self_ce <= cross + 1e-12);
            let entropy: f64 = p.tensor().data().iter().map(|v| -v * v.ln()).sum();
            prop_assert!((self_ce - entropy).abs() < 1e-9);
        }

        #[test]
        fn laplacian_is_a_distribution(b in 1e-2f64..10.0, gt in 0.0f64..6.0) {
            let t = laplacian_target(&dmap(&[gt]), b, 6).unwrap();
            let sum: f64 = t.tensor().data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(t.tensor().data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }

        #[test]
        fn regression_ignores_score_offset(seed in 0u64..1000, c in -20f64..20.0) {
            let s: Vec<f64> = random_dist(seed, 6).iter().map(|v| v * 12.0).collect();
            let a = Tensor::new(vec![6, 1, 1], s.clone()).unwrap();
            let b = Tensor::new(vec![6, 1, 1], s.iter().map(|v| v + c).collect()).unwrap();
            let da = regress_disparity(&softmax_over_disparity(&a, 0.7, &[true; 6]).unwrap()).unwrap();
            let db = regress_disparity(&softmax_over_disparity(&b, 0.7, &[true; 6]).unwrap()).unwrap();
            prop_assert!((da.values().data()[0] - db.values().data()[0]).abs() < 1e-5);
        }

        #[test]
        fn total_loss_is_linear(ce in 0.0f64..5.0, sl1 in 0.0f64..5.0, l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, mu in 0.0f64..1.0) {
            let t = [OutputLoss { ce, sl1 }, OutputLoss { ce: ce * 0.5, sl1: sl1 * 2.0 }];
            let a = combine_losses(&t, &[l1, l2], mu).unwrap().total;
            let b = combine_losses(&t, &[2.0 * l1, l2], mu).unwrap().total;
            let base = combine_losses(&t, &[0.0, l2], mu).unwrap().total;
            prop_assert!(((b - base) - 2.0 * (a - base)).abs() < 1e-9);
            let m0 = combine_losses(&t, &[l1, l2], 0.0).unwrap().total;
            let m2 = combine_losses(&t, &[l1, l2], 2.0 * mu).unwrap().total;
            prop_assert!(((m2 - m0) - 2.0 * (a - m0)).abs() < 1e-9);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let nd = 4;
        let w = 3;
        let scores: Vec<f64> = (0..nd * w).map(|i| ((i * 29 % 13) as f64 - 6.0) * 0.3).collect();
        let valid: Vec<bool> = (0..nd * w).map(|i| (i % w) >= i / w || i / w == 0).collect();
        let gt = dmap(&[0.4, 1.7, 2.2]);
        let target = laplacian_target(&gt, 1.0, nd - 1).unwrap();
        let mask = [true, true, true];
        let t = 0.8;
        let f = |s: &[f64]| -> f64 {
            let st = Tensor::new(vec![nd, 1, w], s.to_vec()).unwrap();
            let p = softmax_over_disparity(&st, t, &valid).unwrap();
            let d = regress_disparity(&p).unwrap();
            let tgt = target.restrict_to(&valid).unwrap();
            cross_entropy_loss(&p, &tgt, &mask, CeOrientation::Standard).unwrap()
                + 0.1 * smooth_l1_loss(&d, &gt, &mask).unwrap()
        };
        let st = Tensor::new(vec![nd, 1, w], scores.clone()).unwrap();
        let p = softmax_over_disparity(&st, t, &valid).unwrap();
        let d = regress_disparity(&p).unwrap();
        let tgt = target.restrict_to(&valid).unwrap();
        let mut gp = cross_entropy_backward(&p, &tgt, &mask, CeOrientation::Standard).unwrap();
        let gd = smooth_l1_backward(&d, &gt, &mask).unwrap().map(|v| 0.1 * v);
        gp.axpy(1.0, &regress_backward(nd, &gd).unwrap()).unwrap();
        let gs = softmax_backward(&p, &gp, t).unwrap();
        for i in 0..scores.len() {
            let mut a = scores.clone();
            let mut b = scores.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (f(&a) - f(&b)) / 2e-6;
            assert!((num - gs.data()[i]).abs() < 1e-7, "{i}: {num} vs {}", gs.data()[i]);
        }
    }
}
