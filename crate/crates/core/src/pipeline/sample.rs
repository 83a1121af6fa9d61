use crate::error::{Error, Result};
use crate::head::DisparityMap;
use crate::tensor::Tensor;

/// Network resolution is a quarter of image resolution in each direction.
pub const GRID: usize = 4;

/// A rectified pair with image-resolution ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub id: String,
    /// `[C, H, W]`, values nominally in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    pub gt: DisparityMap,
}

impl StereoSample {
    pub fn new(id: impl Into<String>, left: Tensor, right: Tensor, gt: DisparityMap) -> Result<Self> {
        let [_, h, w] = left.dims3("left image")?;
        if right.shape() != left.shape() {
            return Err(Error::shape(format!(
                "left {:?} vs right {:?}",
                left.shape(),
                right.shape()
            )));
        }
        if gt.height() != h || gt.width() != w {
            return Err(Error::shape(format!(
                "ground truth {}x{} for a {h}x{w} pair",
                gt.height(),
                gt.width()
            )));
        }
        Ok(Self {
            id: id.into(),
            left,
            right,
            gt,
        })
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    /// Ground truth at network resolution, in network pixels.
    pub fn grid_gt(&self, d_max: usize) -> Result<DisparityMap> {
        to_grid(&self.gt, d_max)
    }
}

/// Subsample `gt` at every fourth pixel (top-left of each cell) and divide by
/// four. Pixels beyond `d_max` grid pixels are masked out.
pub fn to_grid(gt: &DisparityMap, d_max: usize) -> Result<DisparityMap> {
    let (h, w) = (gt.height(), gt.width());
    if h % GRID != 0 || w % GRID != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by {GRID}")));
    }
    let (gh, gw) = (h / GRID, w / GRID);
    let src = gt.values().data();
    let mut values = Vec::with_capacity(gh * gw);
    let mut mask = Vec::with_capacity(gh * gw);
    for y in 0..gh {
        for x in 0..gw {
            let i = y * GRID * w + x * GRID;
            let d = src[i] / GRID as f32;
            values.push(d);
            mask.push(gt.mask()[i] && d.is_finite() && d >= 0.0 && d <= d_max as f32);
        }
    }
    DisparityMap::new(Tensor::new(vec![gh, gw], values)?, mask)
}

/// Nearest-neighbour expansion of a grid-resolution map back to image
/// resolution, converting values to image pixels.
pub fn from_grid(map: &DisparityMap) -> Result<DisparityMap> {
    let (gh, gw) = (map.height(), map.width());
    let (h, w) = (gh * GRID, gw * GRID);
    let src = map.values().data();
    let mut values = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = (y / GRID) * gw + x / GRID;
            values.push(src[i] * GRID as f32);
            mask.push(map.mask()[i]);
        }
    }
    DisparityMap::new(Tensor::new(vec![h, w], values)?, mask)
}
