//! Slice-level kernels behind the convolution ops.

use crate::scalar::Scalar;

/// Zero padding applied before a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Pads {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Pads {
    pub const NONE: Pads = Pads { top: 0, left: 0, bottom: 0, right: 0 };

    /// Padding that keeps spatial size for a `kh x kw` kernel; the odd extra
    /// goes to the bottom/right.
    pub fn same(kh: usize, kw: usize) -> Pads {
        let (ph, pw) = (kh - 1, kw - 1);
        Pads { top: ph / 2, left: pw / 2, bottom: ph - ph / 2, right: pw - pw / 2 }
    }
}

/// Geometry of one stride-1 convolution over a single sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pads: Pads,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + self.pads.top + self.pads.bottom + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + self.pads.left + self.pads.right + 1 - self.kw
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Output columns `ox` whose input column `ox + kj - left` lies inside the
/// image, as a half-open range.
fn valid_cols(g: &ConvGeom, kj: usize, ow: usize) -> (usize, usize) {
    let lo = g.pads.left.saturating_sub(kj).min(ow);
    let hi = (g.width + g.pads.left).saturating_sub(kj).min(ow).max(lo);
    (lo, hi)
}

/// Unfolds one `C x H x W` image into a `(C*kh*kw) x (Ho*Wo)` matrix.
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj, ow);
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - g.pads.top as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if hi > lo {
                        let ix = lo + kj - g.pads.left;
                        line[lo..hi].copy_from_slice(&srow[ix..ix + hi - lo]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj, ow);
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - g.pads.top as isize;
                    if iy < 0 || iy >= g.height as isize || hi == lo {
                        continue;
                    }
                    let ix = lo + kj - g.pads.left;
                    let drow = &mut dst[iy as usize * g.width + ix..iy as usize * g.width + ix + hi - lo];
                    for (d, &v) in drow.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}
