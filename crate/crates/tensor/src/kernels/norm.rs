//! Per-channel batch normalization over the N, H, W axes.

use crate::real::Real;

pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance of the batch.
    pub var: Vec<T>,
}

/// Normalizes with batch statistics. Returns `(y, xhat, inv_std, stats)`.
pub fn forward_train<T: Real>(
    x: &[T],
    dims: (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>, BatchStats<T>) {
    let (n, c, hw) = dims;
    let m = T::count(n * hw);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            for &val in &x[(b * c + ch) * hw..][..hw] {
                let d = val - mu;
                v += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat, inv_std, BatchStats { mean, var })
}

/// Normalizes with fixed statistics. Returns `(y, xhat, inv_std)`.
pub fn forward_eval<T: Real>(
    x: &[T],
    dims: (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = dims;
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

pub struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dims: (usize, usize, usize),
    training: bool,
) -> BnGrads<T> {
    let (n, c, hw) = dims;
    let m = T::count(n * hw);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + hw {
                dx[i] = if training {
                    scale * (dy[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}
