use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D cross-correlation over a `c x h x w` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::arg("kernel and stride must be at least 1"));
        }
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::Shape {
                op: "conv2d",
                expected: vec![kernel, kernel],
                actual: vec![h + 2 * padding, w + 2 * padding],
            });
        }
        Ok(Conv2dGeometry {
            channels,
            h,
            w,
            kernel,
            stride,
            padding,
            out_h: (h + 2 * padding - kernel) / stride + 1,
            out_w: (w + 2 * padding - kernel) / stride + 1,
        })
    }

    /// Rows of the column matrix: `channels * kernel * kernel`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, out: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Unfolds one `c x h x w` sample into a `(c*k*k) x (out_h*out_w)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Conv2dGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oh in 0..g.out_h {
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    match g.source(oh, ki, g.h) {
                        None => line.fill(T::zero()),
                        Some(ih) => {
                            let src = &plane[ih * g.w..(ih + 1) * g.w];
                            for (ow, v) in line.iter_mut().enumerate() {
                                *v = g.source(ow, kj, g.w).map_or(T::zero(), |iw| src[iw]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto `x`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeometry, x: &mut [T]) {
    let k = g.kernel;
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oh in 0..g.out_h {
                    let Some(ih) = g.source(oh, ki, g.h) else { continue };
                    for ow in 0..g.out_w {
                        if let Some(iw) = g.source(ow, kj, g.w) {
                            plane[ih * g.w + iw] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn check_weight<T: Scalar>(op: &'static str, w: &Tensor<T>, expected: [usize; 4]) -> Result<()> {
    if w.shape() != expected {
        return Err(Error::Shape {
            op,
            expected: expected.to_vec(),
            actual: w.shape().to_vec(),
        });
    }
    Ok(())
}

/// Cross-correlation of `x [B, Cin, H, W]` with `w [Cout, Cin, k, k]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    x.expect_rank("conv2d", 4)?;
    w.expect_rank("conv2d weight", 4)?;
    let (batch, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, k) = (w.dim(0), w.dim(2));
    check_weight("conv2d weight", w, [cout, cin, k, k])?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape {
                op: "conv2d bias",
                expected: vec![cout],
                actual: b.shape().to_vec(),
            });
        }
    }
    let g = Conv2dGeometry::new(cin, h, wd, k, stride, padding)?;
    let n_out = g.col_cols();
    let mut out = Tensor::zeros(&[batch, cout, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); g.col_rows() * n_out];
    for b in 0..batch {
        im2col(x.sample(b), &g, &mut cols);
        let y = &mut out.data_mut()[b * cout * n_out..(b + 1) * cout * n_out];
        gemm(false, false, cout, n_out, g.col_rows(), w.data(), &cols, T::zero(), y);
        if let Some(bias) = bias {
            for (c, plane) in y.chunks_exact_mut(n_out).enumerate() {
                let bv = bias.data()[c];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Transposed convolution of `x [B, Cin, H, W]` with `w [Cin, Cout, k, k]`;
/// the adjoint of [`conv2d_forward`] with the same weight and hyperparameters.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    x.expect_rank("conv_transpose2d", 4)?;
    w.expect_rank("conv_transpose2d weight", 4)?;
    let (batch, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, k) = (w.dim(1), w.dim(2));
    check_weight("conv_transpose2d weight", w, [cin, cout, k, k])?;
    let g = transpose_geometry(cout, h, wd, k, stride, padding)?;
    let plane = g.h * g.w;
    let mut out = Tensor::zeros(&[batch, cout, g.h, g.w]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for b in 0..batch {
        gemm(
            true,
            false,
            g.col_rows(),
            h * wd,
            cin,
            w.data(),
            x.sample(b),
            T::zero(),
            &mut cols,
        );
        let y = &mut out.data_mut()[b * cout * plane..(b + 1) * cout * plane];
        col2im(&cols, &g, y);
        if let Some(bias) = bias {
            for (c, p) in y.chunks_exact_mut(plane).enumerate() {
                let bv = bias.data()[c];
                p.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Geometry of the convolution whose adjoint maps `h x w` to the transposed
/// output `((h-1)s - 2p + k)` square.
pub(crate) fn transpose_geometry(
    out_channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGeometry> {
    if h == 0 || w == 0 {
        return Err(Error::arg("empty input to transposed convolution"));
    }
    let oh = ((h - 1) * stride + kernel) as isize - 2 * padding as isize;
    let ow = ((w - 1) * stride + kernel) as isize - 2 * padding as isize;
    if oh <= 0 || ow <= 0 {
        return Err(Error::Shape {
            op: "conv_transpose2d",
            expected: vec![1, 1],
            actual: vec![oh.max(0) as usize, ow.max(0) as usize],
        });
    }
    let g = Conv2dGeometry::new(out_channels, oh as usize, ow as usize, kernel, stride, padding)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok(g)
}
