//! Raw numeric kernels: im2col convolution geometry, GEMM, bilinear warping.
//!
//! These work on flat `[C, H, W]` slices. The autograd tape composes them.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub const fn same(p: usize) -> Self {
        Self {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }

    /// Padding that keeps the spatial size for a stride-1 `k x k` kernel.
    /// Even kernels put the extra row/column after the image.
    pub const fn keep_size(k: usize) -> Self {
        let before = (k - 1) / 2;
        let after = k - 1 - before;
        Self {
            top: before,
            left: before,
            bottom: after,
            right: after,
        }
    }
}

/// Geometry of a strided, padded 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: Padding,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        (in_c, in_h, in_w): (usize, usize, usize),
        (k_h, k_w): (usize, usize),
        stride: usize,
        pad: Padding,
    ) -> Result<Self> {
        let span_h = in_h + pad.top + pad.bottom;
        let span_w = in_w + pad.left + pad.right;
        if stride == 0 || span_h < k_h || span_w < k_w {
            return Err(Error::Structural(format!(
                "kernel {k_h}x{k_w}/stride {stride} does not fit input {in_h}x{in_w} with {pad:?}"
            )));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            pad,
            out_h: (span_h - k_h) / stride + 1,
            out_w: (span_w - k_w) / stride + 1,
        })
    }

    /// Rows of the column matrix: `in_c * k_h * k_w`.
    pub fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    /// Columns of the column matrix: one per output pixel.
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == Padding::default()
    }
}

/// Unfolds `x` (`in_c x in_h x in_w`) into a `col_rows x col_cols` matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let cols = g.col_cols();
    let mut col = vec![0.0; g.col_rows() * cols];
    let plane = g.in_h * g.in_w;
    for c in 0..g.in_c {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds a column matrix back onto an image, accumulating overlaps into `x`.
pub fn col2im(col: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    if g.is_pointwise() {
        for (d, s) in x.iter_mut().zip(col) {
            *d += s;
        }
        return;
    }
    let cols = g.col_cols();
    let plane = g.in_h * g.in_w;
    for c in 0..g.in_c {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Matrix operand: row-major `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, with `out` row-major.
pub fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, out: &mut [f64]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and strides describe in-bounds views of the slices
    // checked above; `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Bilinear tap locations for one sample coordinate with border replication.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
    /// Whether the coordinate was clamped onto the border (zero gradient).
    clamped: bool,
}

fn tap(coord: f64, size: usize) -> Tap {
    let max = (size - 1) as f64;
    let clamped = !(coord > 0.0 && coord < max);
    let c = coord.clamp(0.0, max);
    if size == 1 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: 0.0,
            clamped: true,
        };
    }
    let i0 = (c.floor() as usize).min(size - 2);
    Tap {
        i0,
        i1: i0 + 1,
        frac: c - i0 as f64,
        clamped,
    }
}

/// Backward warp: `out(c, y, x) = bilinear(src[c], x + u(y, x), y + v(y, x))`.
pub fn warp_forward(src: &[f64], flow: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tx = tap(x as f64 + flow[p], w);
            let ty = tap(y as f64 + flow[plane + p], h);
            let (a, b) = (tx.frac, ty.frac);
            for ch in 0..c {
                let s = &src[ch * plane..(ch + 1) * plane];
                let v00 = s[ty.i0 * w + tx.i0];
                let v01 = s[ty.i0 * w + tx.i1];
                let v10 = s[ty.i1 * w + tx.i0];
                let v11 = s[ty.i1 * w + tx.i1];
                out[ch * plane + p] = (1.0 - b) * ((1.0 - a) * v00 + a * v01) + b * ((1.0 - a) * v10 + a * v11);
            }
        }
    }
    out
}

/// Gradients of [`warp_forward`] with respect to the source image and the flow.
pub fn warp_backward(
    src: &[f64],
    flow: &[f64],
    dout: &[f64],
    (c, h, w): (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut dsrc = vec![0.0; c * plane];
    let mut dflow = vec![0.0; 2 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tx = tap(x as f64 + flow[p], w);
            let ty = tap(y as f64 + flow[plane + p], h);
            let (a, b) = (tx.frac, ty.frac);
            let (mut du, mut dv) = (0.0, 0.0);
            for ch in 0..c {
                let g = dout[ch * plane + p];
                let base = ch * plane;
                let (i00, i01) = (ty.i0 * w + tx.i0, ty.i0 * w + tx.i1);
                let (i10, i11) = (ty.i1 * w + tx.i0, ty.i1 * w + tx.i1);
                dsrc[base + i00] += g * (1.0 - b) * (1.0 - a);
                dsrc[base + i01] += g * (1.0 - b) * a;
                dsrc[base + i10] += g * b * (1.0 - a);
                dsrc[base + i11] += g * b * a;
                let s = &src[base..base + plane];
                du += g * ((1.0 - b) * (s[i01] - s[i00]) + b * (s[i11] - s[i10]));
                dv += g * ((1.0 - a) * (s[i10] - s[i00]) + a * (s[i11] - s[i01]));
            }
            if !tx.clamped {
                dflow[p] = du;
            }
            if !ty.clamped {
                dflow[plane + p] = dv;
            }
        }
    }
    (dsrc, dflow)
}
