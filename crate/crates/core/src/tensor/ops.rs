use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Split a shape around `axis` into (outer, axis extent, inner stride).
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted, fixed-order sums).
pub fn softmax_axis<T: Real>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_layout(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..n {
                m = m.max(x[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..n {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[at(k)] /= sum;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Divide every pixel's channel vector by `max(||v||_2, eps)`.
pub fn l2_normalize_channels<T: Real>(input: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let [c, h, w] = input.dims3("l2_normalize_channels")?;
    if !(eps > T::zero()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let plane = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..plane {
        let mut sq = T::zero();
        for ch in 0..c {
            let v = x[ch * plane + p];
            sq += v * v;
        }
        let denom = sq.sqrt().max(eps);
        for ch in 0..c {
            out[ch * plane + p] = x[ch * plane + p] / denom;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}
