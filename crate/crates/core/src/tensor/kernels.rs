//! Raw numeric kernels on flat buffers. All loops reduce in a fixed order so
//! results are bit-identical from run to run.

use super::Real;
use crate::error::{Error, Result};

/// Strided view of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    pub const fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row + (cols - 1) * self.col
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * sc.row + j * sc.col];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(sa.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(sb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(sc.max_index(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: the three asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_unchecked(
            m,
            k,
            n,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

/// `x[b×i]·w[i×o] + bias[o]`.
pub fn affine_forward<T: Real>(x: &[T], w: &[T], bias: &[T], b: usize, i: usize, o: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bias);
    }
    gemm(
        b,
        i,
        o,
        x,
        Strides::row_major(i),
        w,
        Strides::row_major(o),
        T::one(),
        &mut out,
        Strides::row_major(o),
    );
    out
}

/// Returns `(dx, dw, dbias)`; entries are `None` when not requested.
#[allow(clippy::type_complexity)]
pub fn affine_backward<T: Real>(
    g: &[T],
    x: &[T],
    w: &[T],
    (b, i, o): (usize, usize, usize),
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); b * i];
        gemm(
            b,
            o,
            i,
            g,
            Strides::row_major(o),
            w,
            Strides::transposed(o),
            T::zero(),
            &mut dx,
            Strides::row_major(i),
        );
        dx
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); i * o];
        gemm(
            i,
            b,
            o,
            x,
            Strides::transposed(i),
            g,
            Strides::row_major(o),
            T::zero(),
            &mut dw,
            Strides::row_major(o),
        );
        dw
    });
    let db = need[2].then(|| column_sums(g, b, o));
    (dx, dw, db)
}

fn column_sums<T: Real>(g: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for r in 0..rows {
        for (a, &v) in acc.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *a += v;
        }
    }
    acc
}

/// Shape bookkeeping for a 2-d cross-correlation over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::Dimension(format!("conv2d input must be 4-d, got {input:?}")));
        };
        let [filters, kc, kernel_h, kernel_w] = *kernel else {
            return Err(Error::Dimension(format!("conv2d kernel must be 4-d, got {kernel:?}")));
        };
        if kc != in_channels {
            return Err(Error::Dimension(format!(
                "kernel expects {kc} channels, input has {in_channels}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        let extent = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::Dimension(format!(
                    "({size} + 2·{padding} − {k})/{stride} + 1 is not a positive integer"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            filters,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: extent(height, kernel_h)?,
            out_w: extent(width, kernel_w)?,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Images per im2col chunk, bounded so the column buffer stays small.
    fn chunk(&self) -> usize {
        const COL_BUDGET: usize = 1 << 18;
        (COL_BUDGET / (self.patch() * self.positions()).max(1)).clamp(1, self.batch)
    }
}

/// Writes `col[patch × (n·positions)]` for images `first..first + n`.
fn im2col<T: Real>(x: &[T], geo: &Conv2dGeometry, first: usize, n: usize, col: &mut [T]) {
    let p = geo.positions();
    let row_len = n * p;
    let pad = geo.padding as isize;
    for img in 0..n {
        let xb = &x[(first + img) * geo.image_len()..(first + img + 1) * geo.image_len()];
        for c in 0..geo.in_channels {
            let plane = &xb[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
            for ki in 0..geo.kernel_h {
                for kj in 0..geo.kernel_w {
                    let kidx = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                    let dst = &mut col[kidx * row_len + img * p..kidx * row_len + (img + 1) * p];
                    for oy in 0..geo.out_h {
                        let iy = (oy * geo.stride + ki) as isize - pad;
                        let row = &mut dst[oy * geo.out_w..(oy + 1) * geo.out_w];
                        if iy < 0 || iy >= geo.height as isize {
                            row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                        if geo.stride == 1 && geo.padding == 0 {
                            row.copy_from_slice(&src[kj..kj + geo.out_w]);
                            continue;
                        }
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = (ox * geo.stride + kj) as isize - pad;
                            *v = if ix < 0 || ix >= geo.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into image gradients (adjoint of [`im2col`]).
fn col2im<T: Real>(col: &[T], geo: &Conv2dGeometry, first: usize, n: usize, dx: &mut [T]) {
    let p = geo.positions();
    let row_len = n * p;
    let pad = geo.padding as isize;
    for img in 0..n {
        let xb = &mut dx[(first + img) * geo.image_len()..(first + img + 1) * geo.image_len()];
        for c in 0..geo.in_channels {
            let plane = &mut xb[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
            for ki in 0..geo.kernel_h {
                for kj in 0..geo.kernel_w {
                    let kidx = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                    let src = &col[kidx * row_len + img * p..kidx * row_len + (img + 1) * p];
                    for oy in 0..geo.out_h {
                        let iy = (oy * geo.stride + ki) as isize - pad;
                        if iy < 0 || iy >= geo.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                        if geo.stride == 1 && geo.padding == 0 {
                            let src = &src[oy * geo.out_w..(oy + 1) * geo.out_w];
                            for (d, &v) in dst[kj..kj + geo.out_w].iter_mut().zip(src) {
                                *d += v;
                            }
                            continue;
                        }
                        for ox in 0..geo.out_w {
                            let ix = (ox * geo.stride + kj) as isize - pad;
                            if ix >= 0 && ix < geo.width as isize {
                                dst[ix as usize] += src[oy * geo.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], k: &[T], bias: &[T], geo: &Conv2dGeometry) -> Vec<T> {
    let p = geo.positions();
    let f = geo.filters;
    let kk = geo.patch();
    let chunk = geo.chunk();
    let mut out = vec![T::zero(); geo.batch * f * p];
    let mut col = vec![T::zero(); kk * chunk * p];
    let mut tmp = vec![T::zero(); f * chunk * p];
    let mut first = 0;
    while first < geo.batch {
        let n = chunk.min(geo.batch - first);
        let cols = n * p;
        im2col(x, geo, first, n, &mut col[..kk * cols]);
        gemm(
            f,
            kk,
            cols,
            k,
            Strides::row_major(kk),
            &col[..kk * cols],
            Strides::row_major(cols),
            T::zero(),
            &mut tmp[..f * cols],
            Strides::row_major(cols),
        );
        for img in 0..n {
            for (fi, &bf) in bias.iter().enumerate() {
                let src = &tmp[fi * cols + img * p..fi * cols + (img + 1) * p];
                let dst = &mut out[((first + img) * f + fi) * p..((first + img) * f + fi + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bf;
                }
            }
        }
        first += n;
    }
    out
}

/// Returns `(dx, dk, dbias)`; entries are `None` when not requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    g: &[T],
    x: &[T],
    k: &[T],
    geo: &Conv2dGeometry,
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let p = geo.positions();
    let f = geo.filters;
    let kk = geo.patch();
    let chunk = geo.chunk();
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dk = need[1].then(|| vec![T::zero(); k.len()]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); f];
        for img in 0..geo.batch {
            for (fi, d) in db.iter_mut().enumerate() {
                for &v in &g[(img * f + fi) * p..(img * f + fi + 1) * p] {
                    *d += v;
                }
            }
        }
        db
    });
    if dx.is_none() && dk.is_none() {
        return (None, None, db);
    }
    let mut col = vec![T::zero(); kk * chunk * p];
    let mut gt = vec![T::zero(); f * chunk * p];
    let mut first = 0;
    while first < geo.batch {
        let n = chunk.min(geo.batch - first);
        let cols = n * p;
        for img in 0..n {
            for fi in 0..f {
                let src = &g[((first + img) * f + fi) * p..((first + img) * f + fi + 1) * p];
                gt[fi * cols + img * p..fi * cols + (img + 1) * p].copy_from_slice(src);
            }
        }
        if let Some(dk) = dk.as_mut() {
            im2col(x, geo, first, n, &mut col[..kk * cols]);
            gemm(
                f,
                cols,
                kk,
                &gt[..f * cols],
                Strides::row_major(cols),
                &col[..kk * cols],
                Strides::transposed(cols),
                T::one(),
                dk,
                Strides::row_major(kk),
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                kk,
                f,
                cols,
                k,
                Strides::transposed(kk),
                &gt[..f * cols],
                Strides::row_major(cols),
                T::zero(),
                &mut col[..kk * cols],
                Strides::row_major(cols),
            );
            col2im(&col[..kk * cols], geo, first, n, dx);
        }
        first += n;
    }
    (dx, dk, db)
}

/// Shape bookkeeping for max pooling over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::Dimension("pool window and stride must be positive".into()));
        }
        let (planes, height, width) = match *input {
            [b, c, h, w] => (b * c, h, w),
            [h, w] => (1, h, w),
            _ => {
                return Err(Error::Dimension(format!(
                    "maxpool input must be 2-d or 4-d, got {input:?}"
                )))
            }
        };
        let extent = |size: usize| -> Result<usize> {
            if size < window || !(size - window).is_multiple_of(stride) {
                return Err(Error::Dimension(format!(
                    "({size} − {window})/{stride} + 1 is not a positive integer"
                )));
            }
            Ok((size - window) / stride + 1)
        };
        Ok(Self {
            planes,
            height,
            width,
            window,
            stride,
            out_h: extent(height)?,
            out_w: extent(width)?,
        })
    }
}

/// Per-window maxima and the flat input index of each (first occurrence on ties).
pub fn maxpool_forward<T: Real>(x: &[T], geo: &PoolGeometry) -> (Vec<T>, Vec<u32>) {
    let n = geo.planes * geo.out_h * geo.out_w;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for plane in 0..geo.planes {
        let base = plane * geo.height * geo.width;
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let mut best = base + oy * geo.stride * geo.width + ox * geo.stride;
                for wy in 0..geo.window {
                    for wx in 0..geo.window {
                        let idx = base + (oy * geo.stride + wy) * geo.width + ox * geo.stride + wx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Numerically stable softmax of each row of `logits[rows×cols]`.
pub fn softmax_rows<T: Real>(logits: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}
