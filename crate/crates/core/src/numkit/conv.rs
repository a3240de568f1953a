//! Convolution and pooling kernels over NCHW buffers.

use super::tensor::{gemm, MatView, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
/// lies inside the image.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.ow);
    let hi = (g.w + g.pad).saturating_sub(kx).div_ceil(g.stride).min(g.ow).max(lo);
    (lo, hi)
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let src = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if hi > lo {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            for (j, v) in out_row[lo..hi].iter_mut().enumerate() {
                                *v = src_row[first + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let dst = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                if hi == lo {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst_row[first..first + hi - lo].iter_mut().zip(src_row) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in src_row.iter().enumerate() {
                            let i = first + j * g.stride;
                            dst_row[i] = dst_row[i] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * out_img];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    let wv = MatView::row_major(w, g.o, g.col_rows());
    for n in 0..g.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        let dst = &mut out[n * out_img..(n + 1) * out_img];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(g.oh * g.ow).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(dst, wv, MatView::row_major(img, g.c, g.col_cols()), beta);
        } else {
            im2col(img, g, &mut cols);
            gemm(dst, wv, MatView::row_major(&cols, g.col_rows(), g.col_cols()), beta);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * g.oh * g.ow;
    let plane = g.col_cols();
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_img]);
    let mut dw = need.1.then(|| vec![T::zero(); g.o * g.col_rows()]);
    let mut db = need.2.then(|| vec![T::zero(); g.o]);
    let mut cols = vec![T::zero(); g.col_rows() * plane];
    let wv = MatView::row_major(w, g.o, g.col_rows());
    for n in 0..g.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        let dyn_ = &dy[n * out_img..(n + 1) * out_img];
        let dyv = MatView::row_major(dyn_, g.o, plane);
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dyn_.chunks(plane).enumerate() {
                db[o] = db[o] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                gemm(dw, dyv, MatView::row_major(img, g.c, plane).t(), T::one());
            } else {
                im2col(img, g, &mut cols);
                gemm(dw, dyv, MatView::row_major(&cols, g.col_rows(), plane).t(), T::one());
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_img..(n + 1) * in_img];
            if g.is_pointwise() {
                gemm(dst, wv.t(), dyv, T::one());
            } else {
                gemm(&mut cols, wv.t(), dyv, T::zero());
                col2im_add(&cols, g, dst);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn avg_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::one() / T::of((g.window * g.window) as f64);
    let mut out = vec![T::zero(); g.planes * g.oh * g.ow];
    for p in 0..g.planes {
        let src = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        let dst = &mut out[p * g.oh * g.ow..(p + 1) * g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ky in 0..g.window {
                    let row = (oy * g.stride + ky) * g.w;
                    for kx in 0..g.window {
                        acc = acc + src[row + ox * g.stride + kx];
                    }
                }
                dst[oy * g.ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(dy: &[T], g: &PoolGeom, dx: &mut [T]) {
    let inv = T::one() / T::of((g.window * g.window) as f64);
    for p in 0..g.planes {
        let src = &dy[p * g.oh * g.ow..(p + 1) * g.oh * g.ow];
        let dst = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let v = src[oy * g.ow + ox] * inv;
                for ky in 0..g.window {
                    let row = (oy * g.stride + ky) * g.w;
                    for kx in 0..g.window {
                        let i = row + ox * g.stride + kx;
                        dst[i] = dst[i] + v;
                    }
                }
            }
        }
    }
}
