//! Layer kernels with explicit backward passes.
//!
//! Activations are `[channels, depth, height, width]` arrays for a single
//! sample. Convolutions lower to a matrix product over an im2col buffer.

use ndarray::{Array1, Array2, Array4, Axis};

use crate::scalar::Scalar;

/// 3D convolution with cubic kernel, "same"-style padding of `kernel / 2`
/// and a uniform stride.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<S> {
    /// `[out_channels, in_channels * kernel³]`
    pub weight: Array2<S>,
    pub bias: Array1<S>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Parameter gradients of one [`Conv3d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> ConvGrad<S> {
    pub fn zeros_like(conv: &Conv3d<S>) -> Self {
        Self {
            weight: Array2::zeros(conv.weight.raw_dim()),
            bias: Array1::zeros(conv.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad<S>) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, k: S) {
        self.weight.mapv_inplace(|v| v * k);
        self.bias.mapv_inplace(|v| v * k);
    }
}

/// Saved input lowering for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    col: Array2<S>,
    in_shape: [usize; 4],
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

impl<S: Scalar> Conv3d<S> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        assert!(stride >= 1);
        Self {
            weight: Array2::zeros((out_channels, in_channels * kernel.pow(3))),
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_extent(&self, n: usize) -> usize {
        (n + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array4<S>) -> (Array4<S>, ConvCache<S>) {
        let in_shape = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        assert_eq!(in_shape[0], self.in_channels, "input channel mismatch");
        let out = spatial(&in_shape).map(|n| self.output_extent(n));
        let col = im2col(x, self.kernel, self.stride, self.padding(), out);
        let mut y = self.weight.dot(&col);
        for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        let y = y
            .into_shape_with_order((self.out_channels(), out[0], out[1], out[2]))
            .expect("output size matches");
        (y, ConvCache { col, in_shape })
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grad`.
    pub fn backward(&self, cache: &ConvCache<S>, dy: &Array4<S>, grad: &mut ConvGrad<S>) -> Array4<S> {
        let cout = self.out_channels();
        let n = dy.len() / cout;
        let dy2 = dy
            .view()
            .into_shape_with_order((cout, n))
            .expect("contiguous output gradient");
        grad.weight += &dy2.dot(&cache.col.t());
        grad.bias += &dy2.sum_axis(Axis(1));
        let dcol = self.weight.t().dot(&dy2);
        let out = spatial(dy.shape());
        col2im(&dcol, cache.in_shape, self.kernel, self.stride, self.padding(), out)
    }
}

fn im2col<S: Scalar>(x: &Array4<S>, k: usize, s: usize, pad: usize, out: [usize; 3]) -> Array2<S> {
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let (c_in, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let [od, oh, ow] = out;
    let ncols = od * oh * ow;
    let mut col = vec![S::zero(); c_in * k * k * k * ncols];
    let coord = |o: usize, kk: usize, n: usize| -> Option<usize> {
        let i = (o * s + kk) as isize - pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    };
    for c in 0..c_in {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for oz in 0..od {
                        let Some(iz) = coord(oz, kz, d) else { continue };
                        for oy in 0..oh {
                            let Some(iy) = coord(oy, ky, h) else { continue };
                            let src = ((c * d + iz) * h + iy) * w;
                            let line = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            for (ox, v) in line.iter_mut().enumerate() {
                                if let Some(ix) = coord(ox, kx, w) {
                                    *v = xs[src + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c_in * k * k * k, ncols), col).expect("sized above")
}

fn col2im<S: Scalar>(
    dcol: &Array2<S>,
    in_shape: [usize; 4],
    k: usize,
    s: usize,
    pad: usize,
    out: [usize; 3],
) -> Array4<S> {
    let [c_in, d, h, w] = in_shape;
    let [od, oh, ow] = out;
    let ncols = od * oh * ow;
    let dcol = dcol.as_standard_layout();
    let src = dcol.as_slice().expect("standard layout");
    let mut dx = vec![S::zero(); c_in * d * h * w];
    let coord = |o: usize, kk: usize, n: usize| -> Option<usize> {
        let i = (o * s + kk) as isize - pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    };
    for c in 0..c_in {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let rowv = &src[row * ncols..(row + 1) * ncols];
                    for oz in 0..od {
                        let Some(iz) = coord(oz, kz, d) else { continue };
                        for oy in 0..oh {
                            let Some(iy) = coord(oy, ky, h) else { continue };
                            let base = ((c * d + iz) * h + iy) * w;
                            let line = &rowv[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            for (ox, v) in line.iter().enumerate() {
                                if let Some(ix) = coord(ox, kx, w) {
                                    dx[base + ix] += *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((c_in, d, h, w), dx).expect("sized above")
}

pub fn relu<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    x.mapv(|v| v.max(S::zero()))
}

/// Gradient through a rectifier given its output.
pub fn relu_backward<S: Scalar>(out: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
    let mut dx = dy.clone();
    dx.zip_mut_with(out, |g, o| {
        if *o <= S::zero() {
            *g = S::zero();
        }
    });
    dx
}

/// Nearest-neighbour upsampling by 2 on every spatial axis.
pub fn upsample2<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (c, d, h, w) = x.dim();
    Array4::from_shape_fn((c, 2 * d, 2 * h, 2 * w), |(ci, z, y, xx)| x[[ci, z / 2, y / 2, xx / 2]])
}

/// Adjoint of [`upsample2`]: sums each 2×2×2 block.
pub fn upsample2_backward<S: Scalar>(dy: &Array4<S>) -> Array4<S> {
    let (c, d, h, w) = dy.dim();
    let mut dx = Array4::zeros((c, d / 2, h / 2, w / 2));
    for ((ci, z, y, x), v) in dy.indexed_iter() {
        dx[[ci, z / 2, y / 2, x / 2]] += *v;
    }
    dx
}

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// d sigmoid / dz expressed through the output `p`.
pub fn sigmoid_backward<S: Scalar>(p: S, dp: S) -> S {
    dp * p * (S::one() - p)
}
