use rayon::prelude::*;

use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Samples per partial weight-gradient sum. Fixed so results do not depend on
/// the number of threads.
const GRAD_GROUP: usize = 8;

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("conv stride must be at least 1".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::Shape(format!("kernel {kernel} larger than padded input {}", input + 2 * pad)));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects NCHW input and OCHW weights, got {x:?} and {w:?}")));
        }
        if x[1] != w[1] {
            return Err(Error::Shape(format!("conv2d input has {} channels, weights expect {}", x[1], w[1])));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            ho: conv_output_size(x[2], w[2], stride, pad)?,
            wo: conv_output_size(x[3], w[3], stride, pad)?,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.o * self.p()
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }
}

/// Valid output-column range [lo, hi) for a stride-1 row with input offset `off`.
fn valid_span(wo: usize, w: usize, off: isize) -> (usize, usize) {
    let lo = (-off).clamp(0, wo as isize) as usize;
    let hi = (w as isize - off).clamp(lo as isize, wo as isize) as usize;
    (lo, hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    let (h, w) = (g.h as isize, g.w);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let out = &mut cols[row..row + p];
                for oy in 0..g.ho {
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let off = kj as isize - g.pad as isize;
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g.wo, w, off);
                        dst[..lo].fill(T::zero());
                        dst[lo..hi].copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                        dst[hi..].fill(T::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            *d = if ix >= 0 && (ix as usize) < w { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an input-shaped buffer.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    let (h, w) = (g.h as isize, g.w);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src_rows = &cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &src_rows[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let off = kj as isize - g.pad as isize;
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g.wo, w, off);
                        let d = &mut dst[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (a, &b) in d.iter_mut().zip(&src[lo..hi]) {
                            *a = *a + b;
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut y = vec![T::zero(); g.n * g.out_len()];
    y.par_chunks_mut(g.out_len().max(1)).enumerate().for_each_init(
        || vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }],
        |cols, (n, y_n)| {
            let x_n = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let cols: &[T] = if g.is_pointwise() {
                x_n
            } else {
                im2col(x_n, g, cols);
                cols
            };
            gemm(g.o, k, p, MatRef::rows(w, k), MatRef::rows(cols, p), T::zero(), y_n);
            if let Some(b) = b {
                for (row, &bo) in y_n.chunks_mut(p).zip(b) {
                    row.iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        },
    );
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let db = need_db.then(|| {
        let mut db = vec![0f64; g.o];
        for dy_n in dy.chunks(g.out_len().max(1)) {
            for (acc, row) in db.iter_mut().zip(dy_n.chunks(p)) {
                *acc += row.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        db.into_iter().map(T::from_f64).collect()
    });

    let dw = need_dw.then(|| {
        let groups: Vec<Vec<T>> = (0..g.n.div_ceil(GRAD_GROUP))
            .into_par_iter()
            .map(|gi| {
                let mut part = vec![T::zero(); g.o * k];
                let mut buf = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
                for n in gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(g.n) {
                    let x_n = &x[n * g.in_len()..(n + 1) * g.in_len()];
                    let cols: &[T] = if g.is_pointwise() {
                        x_n
                    } else {
                        im2col(x_n, g, &mut buf);
                        &buf
                    };
                    let dy_n = &dy[n * g.out_len()..(n + 1) * g.out_len()];
                    gemm(g.o, p, k, MatRef::rows(dy_n, p), MatRef::rows_t(cols, p), T::one(), &mut part);
                }
                part
            })
            .collect();
        let mut total = vec![T::zero(); g.o * k];
        for part in groups {
            for (t, v) in total.iter_mut().zip(part) {
                *t = *t + v;
            }
        }
        total
    });

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.n * g.in_len()];
        dx.par_chunks_mut(g.in_len().max(1)).enumerate().for_each_init(
            || vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }],
            |dcols, (n, dx_n)| {
                let dy_n = &dy[n * g.out_len()..(n + 1) * g.out_len()];
                if g.is_pointwise() {
                    gemm(k, g.o, p, MatRef::rows_t(w, k), MatRef::rows(dy_n, p), T::zero(), dx_n);
                } else {
                    gemm(k, g.o, p, MatRef::rows_t(w, k), MatRef::rows(dy_n, p), T::zero(), dcols);
                    col2im(dcols, g, dx_n);
                }
            },
        );
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Standalone convolution through the production path.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(&x.shape, &w.shape, stride, pad)?;
    if let Some(b) = b {
        if b.shape != [g.o] {
            return Err(Error::Shape(format!("conv2d bias shape {:?}, expected [{}]", b.shape, g.o)));
        }
    }
    let y = forward(&x.data, &w.data, b.map(|b| b.data.as_slice()), &g);
    Tensor::new(g.out_shape(), y)
}

/// Direct loop convolution, kept as a reference for the fast path.
pub fn conv2d_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(&x.shape, &w.shape, stride, pad)?;
    let mut y = vec![T::zero(); g.n * g.out_len()];
    for n in 0..g.n {
        for o in 0..g.o {
            let bias = b.map_or(T::zero(), |b| b.data[o]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias;
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x.data[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = w.data[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    y[((n * g.o + o) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(g.out_shape(), y)
}
