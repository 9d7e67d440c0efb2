//! Adaptive average pooling with `[floor(i*H/o), ceil((i+1)*H/o))` windows.
//!
//! When the output extent divides the input extent the windows are
//! `k = s = H/o`, i.e. plain non-overlapping average pooling.

use crate::real::Real;

pub fn windows(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

pub fn forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let rows = windows(h, oh);
    let cols = windows(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let mut s = T::zero();
                for r in r0..r1 {
                    for v in &src[r * w + c0..r * w + c1] {
                        s += *v;
                    }
                }
                out[(p * oh + i) * ow + j] = s / T::count((r1 - r0) * (c1 - c0));
            }
        }
    }
    out
}

pub fn backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let rows = windows(h, oh);
    let cols = windows(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let g = dy[(p * oh + i) * ow + j] / T::count((r1 - r0) * (c1 - c0));
                for r in r0..r1 {
                    for v in &mut dst[r * w + c0..r * w + c1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}
