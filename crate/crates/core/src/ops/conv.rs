//! 2-D convolution, cross-correlation convention:
//! `out[n,f,oy,ox] = b[f] + sum_{c,ki,kj} k[f,c,ki,kj] * in[n,c,oy*s+ki-p,ox*s+kj-p]`
//! with zero padding outside the input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kh * self.kw
    }

    /// Output columns `ox` whose input column `ox*s + kj - p` is in range.
    #[inline]
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let ow = self.out_width();
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        let last = self.width as isize - 1 + self.pad as isize - kj as isize;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last as usize / self.stride + 1).min(ow);
        (lo.min(hi), hi)
    }

    #[inline]
    fn input_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if self.kh > self.height + 2 * self.pad || self.kw > self.width + 2 * self.pad {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    self.kh,
                    self.kw,
                    self.height + 2 * self.pad,
                    self.width + 2 * self.pad
                ),
            ));
        }
        Ok(())
    }
}

fn geometry(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeometry> {
    if input.ndim() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input must be [N,C,H,W], got {:?}", input.shape()),
        ));
    }
    if kernel.ndim() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [F,C,kh,kw], got {:?}", kernel.shape()),
        ));
    }
    if input.dim(1) != kernel.dim(1) {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has C={} channels but kernel expects C={}",
                input.dim(1),
                kernel.dim(1)
            ),
        ));
    }
    let g = ConvGeometry {
        in_channels: input.dim(1),
        out_channels: kernel.dim(0),
        height: input.dim(2),
        width: input.dim(3),
        kh: kernel.dim(2),
        kw: kernel.dim(3),
        stride,
        pad,
    };
    g.validate()?;
    Ok(g)
}

/// Accumulates one sample's convolution into `out` (length `g.output_len()`).
pub(crate) fn conv_forward_into(g: &ConvGeometry, input: &[f32], kernel: &[f32], out: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_in = g.height * g.width;
    for f in 0..g.out_channels {
        let out_plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
        for c in 0..g.in_channels {
            let in_plane = &input[c * plane_in..(c + 1) * plane_in];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let w = kernel[((f * g.in_channels + c) * g.kh + ki) * g.kw + kj];
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.col_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = g.input_row(oy, ki) else {
                            continue;
                        };
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        let in_row = &in_plane[iy * g.width..(iy + 1) * g.width];
                        if g.stride == 1 {
                            let shift = lo + kj - g.pad;
                            for (o, &x) in out_row[lo..hi].iter_mut().zip(&in_row[shift..]) {
                                *o += w * x;
                            }
                        } else {
                            for ox in lo..hi {
                                out_row[ox] += w * in_row[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `dL/dinput` for one sample into `grad_in`.
pub(crate) fn conv_backward_input_into(
    g: &ConvGeometry,
    grad_out: &[f32],
    kernel: &[f32],
    grad_in: &mut [f32],
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_in = g.height * g.width;
    for f in 0..g.out_channels {
        let gout_plane = &grad_out[f * oh * ow..(f + 1) * oh * ow];
        if gout_plane.iter().all(|&v| v == 0.0) {
            continue;
        }
        for c in 0..g.in_channels {
            let gin_plane = &mut grad_in[c * plane_in..(c + 1) * plane_in];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let w = kernel[((f * g.in_channels + c) * g.kh + ki) * g.kw + kj];
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.col_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = g.input_row(oy, ki) else {
                            continue;
                        };
                        let gout_row = &gout_plane[oy * ow..(oy + 1) * ow];
                        let gin_row = &mut gin_plane[iy * g.width..(iy + 1) * g.width];
                        if g.stride == 1 {
                            let shift = lo + kj - g.pad;
                            for (gi, &go) in gin_row[shift..].iter_mut().zip(&gout_row[lo..hi]) {
                                *gi += w * go;
                            }
                        } else {
                            for ox in lo..hi {
                                gin_row[ox * g.stride + kj - g.pad] += w * gout_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `dL/dkernel` for one sample into a 64-bit buffer.
pub(crate) fn conv_backward_kernel_into(
    g: &ConvGeometry,
    grad_out: &[f32],
    input: &[f32],
    grad_kernel: &mut [f64],
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_in = g.height * g.width;
    for f in 0..g.out_channels {
        let gout_plane = &grad_out[f * oh * ow..(f + 1) * oh * ow];
        if gout_plane.iter().all(|&v| v == 0.0) {
            continue;
        }
        for c in 0..g.in_channels {
            let in_plane = &input[c * plane_in..(c + 1) * plane_in];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let (lo, hi) = g.col_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    for oy in 0..oh {
                        let Some(iy) = g.input_row(oy, ki) else {
                            continue;
                        };
                        let gout_row = &gout_plane[oy * ow..(oy + 1) * ow];
                        let in_row = &in_plane[iy * g.width..(iy + 1) * g.width];
                        let mut row = 0.0f32;
                        if g.stride == 1 {
                            let shift = lo + kj - g.pad;
                            for (&go, &x) in gout_row[lo..hi].iter().zip(&in_row[shift..]) {
                                row += go * x;
                            }
                        } else {
                            for ox in lo..hi {
                                row += gout_row[ox] * in_row[ox * g.stride + kj - g.pad];
                            }
                        }
                        acc += row as f64;
                    }
                    grad_kernel[((f * g.in_channels + c) * g.kh + ki) * g.kw + kj] += acc;
                }
            }
        }
    }
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let g = geometry(input, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for F={} filters", b.len(), g.out_channels),
            ));
        }
    }
    let n = input.dim(0);
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = vec![0.0f32; n * g.output_len()];
    for (i, out_s) in out.chunks_mut(g.output_len()).enumerate() {
        if let Some(b) = bias {
            for (f, plane) in out_s.chunks_mut(oh * ow).enumerate() {
                plane.fill(b.data()[f]);
            }
        }
        let in_s = &input.data()[i * g.input_len()..(i + 1) * g.input_len()];
        conv_forward_into(&g, in_s, kernel.data(), out_s);
    }
    Tensor::new(&[n, g.out_channels, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let g = geometry(input, kernel, stride, pad)?;
    let n = input.dim(0);
    let expected = [n, g.out_channels, g.out_height(), g.out_width()];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out is {:?}, forward output was {expected:?}",
                grad_out.shape()
            ),
        ));
    }
    let mut gin = vec![0.0f32; input.len()];
    let mut gk = vec![0.0f64; g.kernel_len()];
    let mut gb = vec![0.0f64; g.out_channels];
    let plane = g.out_height() * g.out_width();
    for i in 0..n {
        let gout = &grad_out.data()[i * g.output_len()..(i + 1) * g.output_len()];
        let x = &input.data()[i * g.input_len()..(i + 1) * g.input_len()];
        conv_backward_input_into(
            &g,
            gout,
            kernel.data(),
            &mut gin[i * g.input_len()..(i + 1) * g.input_len()],
        );
        conv_backward_kernel_into(&g, gout, x, &mut gk);
        for (f, p) in gout.chunks(plane).enumerate() {
            gb[f] += p.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gin)?,
        kernel: Tensor::new(kernel.shape(), gk.into_iter().map(|v| v as f32).collect())?,
        bias: Tensor::new(&[g.out_channels], gb.into_iter().map(|v| v as f32).collect())?,
    })
}
