//! Numeric kernels behind the tape ops: strided GEMM and im2col/col2im.

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `cols × rows` buffer.
    pub fn transposed(data: &'a [f32], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: 1,
            col_stride: rows as isize,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize
    }
}

/// `out = beta * out + a · b` with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f32], beta: f32) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.max_offset() < b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: both views were bounds-checked above and `out` holds m*n values
    // laid out row-major, matching the strides passed for C.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
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
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[cin, h, w]` image into `[cin*kh*kw, oh*ow]` columns.
pub(crate) fn im2col(img: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, img: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Below this many output channels the direct kernels beat im2col + GEMM,
/// whose packing cost no longer amortizes.
pub(crate) const DIRECT_MAX_COUT: usize = 4;

/// Output columns whose input column `ox*stride + kx - pad` is in bounds.
fn valid_ox(g: &ConvGeom, kx: usize) -> std::ops::Range<usize> {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx {
        (g.w + g.pad - kx).div_ceil(g.stride).min(g.ow)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Calls `f(c, ky, kx, oy, iy, ox_range)` for every in-bounds kernel row tap.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, std::ops::Range<usize>)) {
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = valid_ox(g, kx);
                if r.is_empty() {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy >= 0 && (iy as usize) < g.h {
                        f(c, ky, kx, oy, iy as usize, r.clone());
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Direct convolution of one image, accumulating into `out` (`[cout, oh*ow]`).
pub(crate) fn conv_direct(img: &[f32], kern: &[f32], g: &ConvGeom, cout: usize, out: &mut [f32]) {
    let (p, kl) = (g.out_pixels(), g.patch_len());
    for_each_tap(g, |c, ky, kx, oy, iy, r| {
        let src = &img[(c * g.h + iy) * g.w..][..g.w];
        for co in 0..cout {
            let wv = kern[co * kl + (c * g.kh + ky) * g.kw + kx];
            let dst = &mut out[co * p + oy * g.ow..][..g.ow];
            if g.stride == 1 {
                let off = kx as isize - g.pad as isize;
                let s = &src[(r.start as isize + off) as usize..(r.end as isize + off) as usize];
                dst[r.clone()].iter_mut().zip(s).for_each(|(d, v)| *d += wv * v);
            } else {
                for ox in r.clone() {
                    dst[ox] += wv * src[ox * g.stride + kx - g.pad];
                }
            }
        }
    });
}

/// Input gradient of [`conv_direct`] for one image, accumulating into `dimg`.
pub(crate) fn conv_direct_input_grad(grad: &[f32], kern: &[f32], g: &ConvGeom, cout: usize, dimg: &mut [f32]) {
    let (p, kl) = (g.out_pixels(), g.patch_len());
    for_each_tap(g, |c, ky, kx, oy, iy, r| {
        let dst = &mut dimg[(c * g.h + iy) * g.w..][..g.w];
        for co in 0..cout {
            let wv = kern[co * kl + (c * g.kh + ky) * g.kw + kx];
            let src = &grad[co * p + oy * g.ow..][..g.ow];
            if g.stride == 1 {
                let off = kx as isize - g.pad as isize;
                let d = &mut dst[(r.start as isize + off) as usize..(r.end as isize + off) as usize];
                d.iter_mut().zip(&src[r.clone()]).for_each(|(d, v)| *d += wv * v);
            } else {
                for ox in r.clone() {
                    dst[ox * g.stride + kx - g.pad] += wv * src[ox];
                }
            }
        }
    });
}

/// Kernel gradient of [`conv_direct`] for one image, accumulating into `dk`.
pub(crate) fn conv_direct_kernel_grad(img: &[f32], grad: &[f32], g: &ConvGeom, cout: usize, dk: &mut [f32]) {
    let (p, kl) = (g.out_pixels(), g.patch_len());
    for_each_tap(g, |c, ky, kx, oy, iy, r| {
        let src = &img[(c * g.h + iy) * g.w..][..g.w];
        for co in 0..cout {
            let gr = &grad[co * p + oy * g.ow..][..g.ow];
            let acc = if g.stride == 1 {
                let off = kx as isize - g.pad as isize;
                let x = &src[(r.start as isize + off) as usize..(r.end as isize + off) as usize];
                dot_lanes(&gr[r.clone()], x)
            } else {
                r.clone().map(|ox| gr[ox] * src[ox * g.stride + kx - g.pad]).sum()
            };
            dk[co * kl + (c * g.kh + ky) * g.kw + kx] += acc;
        }
    });
}
