//! Inner loops shared by the matmul and convolution ops.
//!
//! All three matmul variants accumulate into `out` (callers pass fresh zeros
//! for forward results and existing gradient buffers for accumulation). Loop
//! order keeps the innermost index contiguous in both operands so the
//! compiler can vectorize without any unsafe code.

use crate::Real;

/// out[m x n] += a[m x k] * b[k x n]
pub fn matmul_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}

/// out[m x r] += a[m x n] * b[r x n]^T  (rows of `a` dotted with rows of `b`)
pub fn matmul_abt_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, n: usize, r: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * r);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * r..(i + 1) * r];
        for p in 0..r {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            out_row[p] += acc;
        }
    }
}

/// out[k x n] += a[m x k]^T * b[m x n]  (columns of `a` against rows of `b`)
pub fn matmul_atb_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}

/// Geometry of one 2-D convolution, shared by forward and backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// True when im2col is the identity layout (1x1 kernel, unit stride,
    /// no padding) and the image buffer can be used as the column matrix.
    pub fn is_identity_cols(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one image [c x h x w] into cols[patch_len x oh*ow]; out-of-image
/// taps read as zero.
pub fn im2col(img: &[Real], g: &ConvGeom, cols: &mut [Real]) {
    debug_assert_eq!(img.len(), g.c * g.h * g.w);
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    let ol = g.out_len();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        dst_row[ox] = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold cols[patch_len x oh*ow] back onto an image by scatter-add; the
/// adjoint of [`im2col`].
pub fn col2im_acc(cols: &[Real], g: &ConvGeom, img: &mut [Real]) {
    debug_assert_eq!(img.len(), g.c * g.h * g.w);
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    let ol = g.out_len();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let plane_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane_row[ix as usize] += src_row[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
