//! Ground-truth encoders for the center, offset and orientation heads.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::grid::Grid;

/// Center heatmap, offsets and validity mask for one instance map.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTargets {
    pub height: usize,
    pub width: usize,
    /// `h x w`, max over instances of a unit-peak Gaussian.
    pub heatmap: Vec<f64>,
    /// `2 x h x w`: row plane then column plane, pointing to the centroid.
    pub offsets: Vec<f64>,
    /// Thing pixels, where the offsets are defined.
    pub valid: Vec<bool>,
    /// Mass centroid `(row, col)` per instance id.
    pub centroids: BTreeMap<u32, (f64, f64)>,
}

impl CenterTargets {
    pub fn offset(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.width + col;
        (self.offsets[i], self.offsets[self.height * self.width + i])
    }

    pub fn heat(&self, row: usize, col: usize) -> f64 {
        self.heatmap[row * self.width + col]
    }
}

pub fn centroids(instance: &Grid<u32>) -> BTreeMap<u32, (f64, f64)> {
    let mut acc: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
    for r in 0..instance.height {
        for c in 0..instance.width {
            let id = *instance.get(r, c);
            if id > 0 {
                let e = acc.entry(id).or_insert((0.0, 0.0, 0));
                e.0 += r as f64;
                e.1 += c as f64;
                e.2 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(id, (r, c, n))| (id, (r / n as f64, c / n as f64)))
        .collect()
}

/// Encodes an instance map (0 = no instance) with Gaussian bumps of standard
/// deviation `sigma` cells centered on the cell nearest each centroid.
pub fn encode_center_targets(instance: &Grid<u32>, sigma: f64) -> CenterTargets {
    let (h, w) = (instance.height, instance.width);
    let cents = centroids(instance);
    let mut heatmap = vec![0.0; h * w];
    let two_s2 = 2.0 * sigma * sigma;
    for &(cr, cc) in cents.values() {
        let (pr, pc) = (cr.round(), cc.round());
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - pr).powi(2) + (c as f64 - pc).powi(2);
                let v = (-d2 / two_s2).exp();
                let slot = &mut heatmap[r * w + c];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    let mut offsets = vec![0.0; 2 * h * w];
    let mut valid = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let id = *instance.get(r, c);
            if id == 0 {
                continue;
            }
            let (cr, cc) = cents[&id];
            let i = r * w + c;
            offsets[i] = cr - r as f64;
            offsets[h * w + i] = cc - c as f64;
            valid[i] = true;
        }
    }
    CenterTargets {
        height: h,
        width: w,
        heatmap,
        offsets,
        valid,
        centroids: cents,
    }
}

/// Targets re-derived at `num_levels` resolutions, level `i` being `2^i`
/// times coarser than `instance`; sigma shrinks with the level.
pub fn pyramid_targets(instance: &Grid<u32>, sigma: f64, num_levels: usize) -> Result<Vec<CenterTargets>> {
    (0..num_levels)
        .map(|i| {
            let f = 1usize << i;
            if instance.height / f == 0 || instance.width / f == 0 {
                return Err(invalid(format!("pyramid level {i} has zero extent")));
            }
            Ok(encode_center_targets(&instance.downsample_nearest(f), sigma / f as f64))
        })
        .collect()
}

/// Dense orientation targets `(cos, sin)` with a mask of pixels whose
/// instance carries an orientation.
pub fn orientation_targets(instance: &Grid<u32>, orientations: &BTreeMap<u32, f64>) -> (Vec<f64>, Vec<bool>) {
    let n = instance.len();
    let mut t = vec![0.0; 2 * n];
    let mut mask = vec![false; n];
    for (i, &id) in instance.data.iter().enumerate() {
        if id == 0 {
            continue;
        }
        if let Some(deg) = orientations.get(&id) {
            let rad = deg.to_radians();
            t[i] = rad.cos();
            t[n + i] = rad.sin();
            mask[i] = true;
        }
    }
    (t, mask)
}
