//! Cross-correlation kernels via im2col + GEMM, parallel over the batch.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(input: usize, k: usize, s: usize, p: usize, axis: &str) -> Result<usize> {
    let span = input + 2 * p;
    if s == 0 || k == 0 {
        return Err(shape_err("conv2d", "kernel and stride must be at least 1"));
    }
    if span < k {
        return Err(shape_err(
            "conv2d",
            format!("{axis}: padded extent {span} smaller than kernel {k}"),
        ));
    }
    if (span - k) % s != 0 {
        return Err(shape_err(
            "conv2d",
            format!("{axis}: ({input} + 2*{p} - {k}) is not divisible by stride {s}"),
        ));
    }
    Ok((span - k) / s + 1)
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        wt: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d", format!("input must be NCHW, got {x:?}"))),
        };
        let (f, wc, kh, kw) = match *wt {
            [f, wc, kh, kw] => (f, wc, kh, kw),
            _ => return Err(shape_err("conv2d", format!("weight must be FCkk, got {wt:?}"))),
        };
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        let oh = out_extent(h, kh, stride.0, padding.0, "height")?;
        let ow = out_extent(w, kw, stride.1, padding.1, "width")?;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.f * self.out_pixels() * self.cols_rows()) as u64
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride.0 + i) as isize - g.padding.0 as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + j) as isize - g.padding.1 as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride.0 + i) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride.1 + j) as isize - g.padding.1 as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let p = g.out_pixels();
    let k = g.cols_rows();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.f * p];
    out.par_chunks_mut(g.f * p)
        .enumerate()
        .for_each(|(n, out_n)| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            if let Some(b) = b {
                for (f, chunk) in out_n.chunks_mut(p).enumerate() {
                    chunk.fill(b[f]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            if g.is_pointwise() {
                T::gemm(g.f, k, p, T::one(), w, false, xn, false, beta, out_n);
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(g, xn, &mut cols);
                T::gemm(g.f, k, p, T::one(), w, false, &cols, false, beta, out_n);
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let p = g.out_pixels();
    let k = g.cols_rows();
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * p;

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let dyn_ = &dy[n * out_len..(n + 1) * out_len];
            let pointwise = g.is_pointwise();
            let cols_owned;
            let cols: &[T] = if pointwise || !need_dw {
                xn
            } else {
                let mut c = vec![T::zero(); k * p];
                im2col(g, xn, &mut c);
                cols_owned = c;
                &cols_owned
            };
            let dw = need_dw.then(|| {
                let mut dw = vec![T::zero(); g.f * k];
                T::gemm(g.f, p, k, T::one(), dyn_, false, cols, true, T::zero(), &mut dw);
                dw
            });
            let dx = need_dx.then(|| {
                if pointwise {
                    let mut dx = vec![T::zero(); in_len];
                    T::gemm(k, g.f, p, T::one(), w, true, dyn_, false, T::zero(), &mut dx);
                    dx
                } else {
                    let mut dcols = vec![T::zero(); k * p];
                    T::gemm(k, g.f, p, T::one(), w, true, dyn_, false, T::zero(), &mut dcols);
                    let mut dx = vec![T::zero(); in_len];
                    col2im(g, &dcols, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(g.n * in_len);
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_ref().expect("dx computed"));
        }
        dx
    });
    // Fixed reduction order keeps results independent of the thread count.
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); g.f * k];
        for (_, d) in &per_sample {
            for (a, v) in acc.iter_mut().zip(d.as_ref().expect("dw computed")) {
                *a += *v;
            }
        }
        acc
    });
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.f];
        for n in 0..g.n {
            for (f, slot) in db.iter_mut().enumerate() {
                let chunk = &dy[n * out_len + f * p..n * out_len + (f + 1) * p];
                *slot += chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation used as an oracle.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
        for n in 0..g.n {
            for f in 0..g.f {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let iy = (oy * g.stride.0 + i) as isize - g.padding.0 as isize;
                                    let ix = (ox * g.stride.1 + j) as isize - g.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((f * g.c + c) * g.kh + i) * g.kw + j];
                                }
                            }
                        }
                        out[((n * g.f + f) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle_with_stride_and_padding() {
        for &(stride, padding, kh, kw) in &[
            ((1, 1), (1, 1), 3, 3),
            ((2, 2), (0, 0), 2, 2),
            ((1, 1), (1, 0), 3, 1),
            ((1, 1), (0, 1), 1, 3),
            ((1, 1), (0, 0), 1, 1),
        ] {
            let g = ConvGeom::new(&[2, 3, 6, 6], &[4, 3, kh, kw], stride, padding).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 36).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * kh * kw).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
            assert_eq!(forward(&g, &x, &w, None), naive(&g, &x, &w));
        }
    }

    #[test]
    fn non_integer_output_extent_is_rejected() {
        assert!(ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 2, 2], (2, 2), (0, 0)).is_err());
        assert!(ConvGeom::new(&[1, 2, 5, 5], &[1, 1, 3, 3], (1, 1), (0, 0)).is_err());
    }
}
