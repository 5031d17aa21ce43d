//! Direct 2-D convolution kernels (cross-correlation, zero padding) via
//! im2col and a GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::{Real, Tensor};
use crate::error::{Result, SimiError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(SimiError::NonPositiveStride);
        }
        let (&[batch, in_channels, height, width], &[out_channels, w_in, kh, kw]) = (x, w) else {
            return Err(SimiError::ShapeMismatch(format!("conv2d wants rank-4 input and weight, got {x:?} and {w:?}")));
        };
        if w_in != in_channels || kh != kw {
            return Err(SimiError::ShapeMismatch(format!(
                "conv2d weight {w:?} incompatible with input {x:?}"
            )));
        }
        if bias != [out_channels] {
            return Err(SimiError::ShapeMismatch(format!("conv2d bias {bias:?}, want [{out_channels}]")));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(SimiError::ShapeMismatch(format!(
                "kernel {kh} larger than padded input {height}x{width}"
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel: kh,
            stride,
            padding,
            out_height: (height + 2 * padding - kh) / stride + 1,
            out_width: (width + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }
}

/// Output positions `o` whose input index `o·stride + offset - padding`
/// falls inside `[0, len)`, as a half-open range.
fn valid_range(offset: usize, g: &ConvGeometry, len: usize, out_len: usize) -> (usize, usize) {
    let (p, s) = (g.padding, g.stride);
    let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
    let hi = if len + p > offset { ((len + p - offset - 1) / s + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Visits every `(col row, output row offset, input row offset, x range)`
/// span of the patch matrix; positions outside the spans read zero padding.
fn for_each_span(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, (usize, usize), usize)) {
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = c * g.height * g.width;
        for ky in 0..k {
            let (ylo, yhi) = valid_range(ky, g, g.height, g.out_height);
            for kx in 0..k {
                let xr = valid_range(kx, g, g.width, g.out_width);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.padding;
                    let ix0 = (xr.0 * g.stride + kx) as isize - g.padding as isize;
                    f(row, oy * g.out_width, plane + iy * g.width, xr, ix0 as usize);
                }
                row += 1;
            }
        }
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (op, ow, s) = (g.out_pixels(), g.out_width, g.stride);
    if g.padding > 0 {
        // zero only the entries that read padding
        let mut row = 0;
        for _ in 0..g.in_channels {
            for ky in 0..g.kernel {
                let (ylo, yhi) = valid_range(ky, g, g.height, g.out_height);
                for kx in 0..g.kernel {
                    let (lo, hi) = valid_range(kx, g, g.width, ow);
                    let r = &mut col[row * op..(row + 1) * op];
                    r[..ylo * ow].fill(T::zero());
                    r[yhi * ow..].fill(T::zero());
                    for oy in ylo..yhi {
                        r[oy * ow..oy * ow + lo].fill(T::zero());
                        r[oy * ow + hi..(oy + 1) * ow].fill(T::zero());
                    }
                    row += 1;
                }
            }
        }
    }
    for_each_span(g, |row, out_off, in_off, (lo, hi), ix0| {
        let dst = &mut col[row * op + out_off + lo..row * op + out_off + hi];
        let src = &x[in_off + ix0..];
        if s == 1 {
            dst.copy_from_slice(&src[..hi - lo]);
        } else {
            dst.iter_mut().enumerate().for_each(|(j, d)| *d = src[j * s]);
        }
    });
}

fn col2im<T: Real>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (op, s) = (g.out_pixels(), g.stride);
    for_each_span(g, |row, out_off, in_off, (lo, hi), ix0| {
        let src = &col[row * op + out_off + lo..row * op + out_off + hi];
        let dst = &mut dx[in_off + ix0..];
        if s == 1 {
            for (d, &v) in dst[..src.len()].iter_mut().zip(src) {
                *d = *d + v;
            }
        } else {
            for (j, &v) in src.iter().enumerate() {
                dst[j * s] = dst[j * s] + v;
            }
        }
    });
}

fn view<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous view")
}

fn view_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous view")
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let (kl, op) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * op;
    let mut out: Vec<T> = Vec::with_capacity(g.batch * out_len);
    for _ in 0..g.batch {
        for &b in bias.data() {
            out.extend(std::iter::repeat_n(b, op));
        }
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kl * op] };
    let w = view(weight.data(), g.out_channels, kl);
    for n in 0..g.batch {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        let cols = if g.is_pointwise() {
            xn
        } else {
            im2col(&g, xn, &mut col);
            &col
        };
        general_mat_mul(T::one(), &w, &view(cols, kl, op), T::one(), &mut view_mut(dst, g.out_channels, op));
    }
    Tensor::new(&g.out_shape(), out)
}

/// Gradients of a convolution w.r.t. input, weight and bias given the
/// output gradient. The input gradient is skipped unless `input_grad`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let bias_shape = [weight.shape()[0]];
    let g = ConvGeometry::new(x.shape(), weight.shape(), &bias_shape, stride, padding)?;
    let (kl, op) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * op;
    let mut dx = if input_grad { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); g.out_channels];
    let mut col = vec![T::zero(); kl * op];
    let mut dcol = if input_grad { vec![T::zero(); kl * op] } else { Vec::new() };
    let w = view(weight.data(), g.out_channels, kl);
    for n in 0..g.batch {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let gn = &grad_out.data()[n * out_len..(n + 1) * out_len];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc = *acc + gn[co * op..(co + 1) * op].iter().copied().sum::<T>();
        }
        let gview = view(gn, g.out_channels, op);
        if g.is_pointwise() {
            let cols = view(xn, kl, op);
            general_mat_mul(T::one(), &gview, &cols.t(), T::one(), &mut view_mut(&mut dw, g.out_channels, kl));
            if input_grad {
                let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                general_mat_mul(T::one(), &w.t(), &gview, T::zero(), &mut view_mut(dxn, kl, op));
            }
        } else {
            im2col(&g, xn, &mut col);
            let cols = view(&col, kl, op);
            general_mat_mul(T::one(), &gview, &cols.t(), T::one(), &mut view_mut(&mut dw, g.out_channels, kl));
            if input_grad {
                general_mat_mul(T::one(), &w.t(), &gview, T::zero(), &mut view_mut(&mut dcol, kl, op));
                col2im(&g, &dcol, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
    Ok((
        if input_grad { Some(Tensor::new(x.shape(), dx)?) } else { None },
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&bias_shape, db)?,
    ))
}
