//! Zero-padded cross-correlation in two and three spatial dimensions.
//!
//! Both entry points lower onto one 3D kernel (`conv2d` is a depth-1 conv3d).
//! Every output element accumulates bias first, then taps in
//! `(c_in, kd, kh, kw)` lexicographic order, so results are bitwise stable.

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

fn out_extent(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if k.is_multiple_of(2) {
        return Err(Error::shape(format!("kernel extent {k} must be odd")));
    }
    if s == 0 {
        return Err(Error::shape("stride must be >= 1"));
    }
    if n + 2 * p < k {
        return Err(Error::shape(format!(
            "extent {n} with pad {p} is smaller than kernel {k}"
        )));
    }
    Ok((n + 2 * p - k) / s + 1)
}

impl Geom {
    fn new(
        input: &[usize],
        kernel: &[usize],
        bias_len: usize,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let (cin, inp) = (input[0], [input[1], input[2], input[3]]);
        let (cout, kcin, ker) = (kernel[0], kernel[1], [kernel[2], kernel[3], kernel[4]]);
        if kcin != cin {
            return Err(Error::shape(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if bias_len != cout {
            return Err(Error::shape(format!(
                "bias has {bias_len} entries for {cout} output channels"
            )));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = out_extent(inp[a], ker[a], stride[a], pad[a])?;
        }
        Ok(Self {
            cin,
            cout,
            input: inp,
            kernel: ker,
            stride,
            pad,
            output,
        })
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Input index along one axis for output `o` and tap `k`, if in bounds.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (i >= 0 && (i as usize) < self.input[axis]).then_some(i as usize)
    }

    /// Range of output positions along the last axis whose source is in bounds.
    #[inline]
    fn inner_range(&self, k: usize) -> std::ops::Range<usize> {
        let (s, p, n) = (self.stride[2], self.pad[2], self.input[2]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n + p > k {
            ((n - 1 + p - k) / s + 1).min(self.output[2])
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Visit every (input row, output row) pair for one tap. The callback
    /// receives the input row offset, output row offset, and tap's x index.
    #[inline]
    fn for_each_row(&self, kz: usize, ky: usize, mut f: impl FnMut(usize, usize)) {
        let [_, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        for oz in 0..od {
            let Some(iz) = self.src(0, oz, kz) else { continue };
            for oy in 0..oh {
                let Some(iy) = self.src(1, oy, ky) else { continue };
                f((iz * ih + iy) * iw, (oz * oh + oy) * ow);
            }
        }
    }
}

/// Unfolds the input into a `[cin · taps, out_plane]` matrix whose row
/// `ci · taps + t` holds, for every output position, the input value under
/// tap `t` (zero where the tap falls in the padding).
fn im2col<T: Real>(x: &[T], g: &Geom) -> Vec<T> {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let [kd, kh, kw] = g.kernel;
    let sw = g.stride[2];
    let mut col = vec![T::zero(); g.cin * taps * op];
    for t in 0..kd * kh {
        let mut pairs = Vec::new();
        g.for_each_row(t / kh, t % kh, |i, o| pairs.push((i, o)));
        for kx in 0..kw {
            let range = g.inner_range(kx);
            let off = kx as isize - g.pad[2] as isize;
            for ci in 0..g.cin {
                let xc = &x[ci * ip..(ci + 1) * ip];
                let row = &mut col[(ci * taps + t * kw + kx) * op..][..op];
                for &(irow, orow) in &pairs {
                    for ox in range.clone() {
                        row[orow + ox] = xc[irow + ((ox * sw) as isize + off) as usize];
                    }
                }
            }
        }
    }
    col
}

fn forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    g: &Geom,
) -> Vec<T> {
    let op = g.out_plane();
    let k = g.cin * g.taps();
    let col = im2col(x, g);
    let mut out = vec![T::zero(); g.cout * op];
    for (co, oc) in out.chunks_exact_mut(op).enumerate() {
        oc.fill(b[co]);
        for (&wv, src) in w[co * k..(co + 1) * k].iter().zip(col.chunks_exact(op)) {
            for (a, &v) in oc.iter_mut().zip(src) {
                *a += wv * v;
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input, kernel, and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

fn backward<T: Real>(x: &[T], w: &[T], dy: &[T], g: &Geom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let [_, kh, kw] = g.kernel;
    let sw = g.stride[2];
    let mut dx = vec![T::zero(); g.cin * ip];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        let dyc = &dy[co * op..(co + 1) * op];
        db[co] = dyc.iter().fold(T::zero(), |a, &v| a + v);
        for ci in 0..g.cin {
            let xc = &x[ci * ip..(ci + 1) * ip];
            let dxc = &mut dx[ci * ip..(ci + 1) * ip];
            let base = (co * g.cin + ci) * taps;
            for kz in 0..g.kernel[0] {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let t = base + (kz * kh + ky) * kw + kx;
                        let wv = w[t];
                        let range = g.inner_range(kx);
                        let off = kx as isize - g.pad[2] as isize;
                        let mut acc = T::zero();
                        g.for_each_row(kz, ky, |irow, orow| {
                            for ox in range.clone() {
                                let ix = irow + ((ox * sw) as isize + off) as usize;
                                let gv = dyc[orow + ox];
                                acc += gv * xc[ix];
                                dxc[ix] += wv * gv;
                            }
                        });
                        dw[t] = acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn geom2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geom> {
    let [c, h, w] = input.dims3("conv2d input")?;
    let [co, ci, kh, kw] = kernel.dims4("conv2d kernel")?;
    Geom::new(
        &[c, 1, h, w],
        &[co, ci, 1, kh, kw],
        bias.len(),
        [1, stride, stride],
        [0, pad, pad],
    )
}

fn geom3d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geom> {
    let [c, d, h, w] = input.dims4("conv3d input")?;
    let k = kernel.shape();
    if k.len() != 5 {
        return Err(Error::shape(format!(
            "conv3d kernel: expected rank 5, got {k:?}"
        )));
    }
    Geom::new(
        &[c, d, h, w],
        k,
        bias.len(),
        [stride; 3],
        [pad; 3],
    )
}

/// 2D cross-correlation of `input [C_in,H,W]` with `kernel [C_out,C_in,kh,kw]`.
///
/// Output extents follow `floor((n + 2*pad - k) / stride) + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geom2d(input, kernel, bias, stride, pad)?;
    let out = forward(input.data(), kernel.data(), bias.data(), &g);
    Tensor::new(vec![g.cout, g.output[1], g.output[2]], out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let bias = Tensor::zeros(vec![kernel.shape()[0]])?;
    let g = geom2d(input, kernel, &bias, stride, pad)?;
    if grad_out.shape() != [g.cout, g.output[1], g.output[2]] {
        return Err(Error::shape(format!(
            "conv2d upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let (dx, dw, db) = backward(input.data(), kernel.data(), grad_out.data(), &g);
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

/// 3D cross-correlation of `input [C_in,D,H,W]` with `kernel [C_out,C_in,kd,kh,kw]`.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geom3d(input, kernel, bias, stride, pad)?;
    let out = forward(input.data(), kernel.data(), bias.data(), &g);
    Tensor::new(vec![g.cout, g.output[0], g.output[1], g.output[2]], out)
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let bias = Tensor::zeros(vec![kernel.shape()[0]])?;
    let g = geom3d(input, kernel, &bias, stride, pad)?;
    if grad_out.shape() != [g.cout, g.output[0], g.output[1], g.output[2]] {
        return Err(Error::shape(format!(
            "conv3d upstream gradient {:?}",
            grad_out.shape()
        )));
    }
    let (dx, dw, db) = backward(input.data(), kernel.data(), grad_out.data(), &g);
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Direct six-loop reference, independent of the row/range bookkeeping.
    fn naive2d(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let [c, h, wd] = x.dims3("x").unwrap();
        let [co, _, kh, kw] = w.dims4("w").unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = vec![0.0f32; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o] as f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * s + ky) as isize - p as isize;
                                let ix = (xx * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += (w.data()[((o * c + ci) * kh + ky) * kw + kx]
                                    * x.data()[(ci * h + iy as usize) * wd + ix as usize])
                                    as f64;
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xx] = acc as f32;
                }
            }
        }
        t(&[co, oh, ow], out)
    }

    fn lcg(seed: u64, n: usize) -> Vec<f32> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = t(&[2, 3, 4], lcg(1, 24));
        let mut k = vec![0.0; 4];
        k[0] = 1.0;
        k[3] = 1.0;
        let y = conv2d(&x, &t(&[2, 2, 1, 1], k), &t(&[2], vec![0.0; 2]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::full(vec![1, 3, 3], 1.0f32).unwrap();
        let y = conv2d(&x, &t(&[1, 1, 1, 1], vec![2.0]), &t(&[1], vec![0.0]), 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_padding_overlap_counts() {
        let x = Tensor::full(vec![1, 3, 3], 1.0f32).unwrap();
        let k = Tensor::full(vec![1, 1, 3, 3], 1.0f32).unwrap();
        let y = conv2d(&x, &k, &t(&[1], vec![0.0]), 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv3d_identity_overlap_and_bias() {
        let x = t(&[1, 2, 3, 4], lcg(5, 24));
        let id = conv3d(&x, &t(&[1, 1, 1, 1, 1], vec![1.0]), &t(&[1], vec![0.0]), 1, 0).unwrap();
        assert_eq!(id, x);

        let ones = Tensor::full(vec![1, 3, 3, 3], 1.0f32).unwrap();
        let k = Tensor::full(vec![1, 1, 3, 3, 3], 1.0f32).unwrap();
        let y = conv3d(&ones, &k, &t(&[1], vec![0.0]), 1, 1).unwrap();
        assert_eq!(y.data()[13], 27.0);
        assert_eq!(y.data()[0], 8.0);

        let zeros = Tensor::zeros(vec![2, 3, 3, 3]).unwrap();
        let k = t(&[2, 2, 3, 3, 3], lcg(9, 108));
        let y = conv3d(&zeros, &k, &t(&[2], vec![0.5, -1.5]), 1, 1).unwrap();
        assert!(y.data()[..27].iter().all(|&v| v == 0.5));
        assert!(y.data()[27..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn matches_naive_reference_with_stride() {
        for (s, p, h, w) in [(1, 1, 5, 7), (2, 1, 8, 8), (2, 0, 7, 9), (3, 2, 10, 6)] {
            let x = t(&[3, h, w], lcg(h as u64 * 31 + w as u64, 3 * h * w));
            let k = t(&[2, 3, 3, 3], lcg(77, 54));
            let b = t(&[2], vec![0.25, -0.5]);
            let fast = conv2d(&x, &k, &b, s, p).unwrap();
            let slow = naive2d(&x, &k, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros(vec![2, 4, 4]).unwrap();
        let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![1]).unwrap();
        assert!(matches!(conv2d(&x, &k, &b, 1, 1), Err(Error::ShapeMismatch(_))));
        let k = Tensor::<f32>::zeros(vec![1, 2, 2, 2]).unwrap();
        assert!(conv2d(&x, &k, &b, 1, 0).is_err());
        let k = Tensor::<f32>::zeros(vec![1, 2, 5, 5]).unwrap();
        assert!(conv2d(&x, &k, &b, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 3, 3]).unwrap(), &b, 0, 1).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = Tensor::<f64>::new(vec![2, 5, 6], lcg(3, 60).iter().map(|&v| v as f64).collect()).unwrap();
        let k = Tensor::<f64>::new(vec![3, 2, 3, 3], lcg(4, 54).iter().map(|&v| v as f64).collect()).unwrap();
        let b = Tensor::<f64>::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let up = conv2d(&x, &k, &b, 2, 1).unwrap();
        let dy = Tensor::<f64>::new(up.shape().to_vec(), lcg(8, up.len()).iter().map(|&v| v as f64).collect()).unwrap();
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = conv2d(x, k, b, 2, 1).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv2d_backward(&x, &k, &dy, 2, 1).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let n = (loss(&xp, &k, &b) - loss(&xm, &k, &b)) / (2.0 * h);
            assert!((n - g.input.data()[i]).abs() < 1e-8);
        }
        for i in 0..k.len() {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp.data_mut()[i] += h;
            km.data_mut()[i] -= h;
            let n = (loss(&x, &kp, &b) - loss(&x, &km, &b)) / (2.0 * h);
            assert!((n - g.kernel.data()[i]).abs() < 1e-8);
        }
        let sum: f64 = dy.data()[..up.len() / 3].iter().sum();
        assert!((g.bias.data()[0] - sum).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn conv_is_linear_in_input(seed in 0u64..1000, a in -3.0f32..3.0, b in -3.0f32..3.0) {
            let x = t(&[2, 4, 5], lcg(seed, 40));
            let y = t(&[2, 4, 5], lcg(seed + 1, 40));
            let k = t(&[3, 2, 3, 3], lcg(seed + 2, 54));
            let z = t(&[3], vec![0.0; 3]);
            let mix = t(&[2, 4, 5], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect());
            let lhs = conv2d(&mix, &k, &z, 1, 1).unwrap();
            let fx = conv2d(&x, &k, &z, 1, 1).unwrap();
            let fy = conv2d(&y, &k, &z, 1, 1).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * fx.data()[i] + b * fy.data()[i];
                let scale = 1.0f32.max(rhs.abs()).max(lhs.data()[i].abs());
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-4 * scale);
            }
            let x3 = x.clone().reshape(vec![2, 1, 4, 5]).unwrap();
            let y3 = y.clone().reshape(vec![2, 1, 4, 5]).unwrap();
            let m3 = mix.reshape(vec![2, 1, 4, 5]).unwrap();
            let k3 = t(&[1, 2, 1, 3, 3], lcg(seed + 3, 18));
            let z3 = t(&[1], vec![0.0]);
            let l3 = conv3d(&m3, &k3, &z3, 1, 1).unwrap();
            let fx3 = conv3d(&x3, &k3, &z3, 1, 1).unwrap();
            let fy3 = conv3d(&y3, &k3, &z3, 1, 1).unwrap();
            for i in 0..l3.len() {
                let rhs = a * fx3.data()[i] + b * fy3.data()[i];
                let scale = 1.0f32.max(rhs.abs());
                prop_assert!((l3.data()[i] - rhs).abs() <= 1e-4 * scale);
            }
        }

        #[test]
        fn conv_is_bitwise_repeatable(seed in 0u64..1000) {
            let x = t(&[2, 3, 6, 6], lcg(seed, 216));
            let k = t(&[4, 2, 3, 3, 3], lcg(seed ^ 0xabc, 216));
            let b = t(&[4], lcg(seed + 9, 4));
            let a = conv3d(&x, &k, &b, 1, 1).unwrap();
            let c = conv3d(&x, &k, &b, 1, 1).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
