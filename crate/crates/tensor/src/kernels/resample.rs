//! Bilinear resampling with half-pixel centers (corners not aligned).

use crate::real::Real;

/// Per output index: `(lo, hi, weight_of_hi)`.
pub fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[i * ow + j] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = g[i * ow + j];
                dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * w + x0] += v * fy * (T::one() - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}
