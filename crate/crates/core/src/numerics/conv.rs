//! im2col / col2im lowering for 2-D convolutions (cross-correlation).

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a convolution reading a `channels×h×w` image.
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::shape("kernel and stride must be >= 1"));
        }
        let out = |n: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::shape(format!(
                    "non-integral conv output: size {n}, kernel {k}, stride {stride}, pad {pad}"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(ConvGeom {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            out_h: out(h)?,
            out_w: out(w)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image into a `(C·k·k) × (out_h·out_w)` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
