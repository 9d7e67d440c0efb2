//! Panoptic assembly: center peaks, offset grouping, majority-vote
//! categories and per-instance orientation.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub center_threshold: f64,
    pub nms_kernel: usize,
    pub top_k: usize,
    pub min_area: usize,
    pub thing_classes: Vec<u32>,
    /// Category written where no valid label survives.
    pub void_id: u32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            center_threshold: 0.1,
            nms_kernel: 3,
            top_k: 200,
            min_area: 0,
            thing_classes: vec![2, 3, 4, 5],
            void_id: 255,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_threshold > 0.0 && self.center_threshold < 1.0) {
            return Err(invalid("fusion.center_threshold must lie in (0, 1)"));
        }
        if self.nms_kernel % 2 == 0 {
            return Err(invalid("fusion.nms_kernel must be odd"));
        }
        if self.thing_classes.contains(&self.void_id) {
            return Err(invalid("void id collides with a thing class"));
        }
        Ok(())
    }

    pub fn is_thing(&self, class: u32) -> bool {
        self.thing_classes.contains(&class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Center {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Local maxima of a max-filter window, at or above the threshold, best
/// `top_k` by score. Among equal values inside one window only the first in
/// row-major order survives.
pub fn find_centers(heatmap: &Grid<f64>, cfg: &FusionConfig) -> Vec<Center> {
    let (h, w) = (heatmap.height, heatmap.width);
    let r = cfg.nms_kernel / 2;
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let v = *heatmap.get(row, col);
            if v < cfg.center_threshold {
                continue;
            }
            let mut peak = true;
            'win: for rr in row.saturating_sub(r)..(row + r + 1).min(h) {
                for cc in col.saturating_sub(r)..(col + r + 1).min(w) {
                    let u = *heatmap.get(rr, cc);
                    let earlier = (rr, cc) < (row, col);
                    if u > v || (earlier && u == v) {
                        peak = false;
                        break 'win;
                    }
                }
            }
            if peak {
                out.push(Center { row, col, score: v });
            }
        }
    }
    // row-major discovery order makes the sort stable on position
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.top_k);
    out
}

/// Assigns every foreground pixel to the center nearest its regressed
/// position `p + offset(p)`; instance ids are center indices + 1.
pub fn group_pixels(centers: &[Center], offsets: &Grid<[f64; 2]>, foreground: &Grid<bool>) -> Grid<u32> {
    let mut out = Grid::filled(offsets.height, offsets.width, 0u32);
    if centers.is_empty() {
        return out;
    }
    for row in 0..offsets.height {
        for col in 0..offsets.width {
            if !*foreground.get(row, col) {
                continue;
            }
            let [dy, dx] = *offsets.get(row, col);
            let (py, px) = (row as f64 + dy, col as f64 + dx);
            let mut best = (f64::INFINITY, 0usize);
            for (i, c) in centers.iter().enumerate() {
                let d = (py - c.row as f64).powi(2) + (px - c.col as f64).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            out.set(row, col, best.1 as u32 + 1);
        }
    }
    out
}

/// Per-pixel category and instance, plus one orientation entry per instance
/// (`None` when undefined).
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticMap {
    pub category: Grid<u32>,
    pub instance: Grid<u32>,
    pub orientations: BTreeMap<u32, Option<f64>>,
}

impl PanopticMap {
    /// Instance ids present in the grid.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.instance.data.iter().copied().filter(|&i| i > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// `instance > 0` exactly on thing pixels; one category per instance.
    pub fn check(&self, cfg: &FusionConfig) -> Result<()> {
        if !self.category.same_extent(&self.instance) {
            return Err(invalid("panoptic map grids differ in extent"));
        }
        let mut cat_of: BTreeMap<u32, u32> = BTreeMap::new();
        for (&c, &i) in self.category.data.iter().zip(&self.instance.data) {
            if (i > 0) != cfg.is_thing(c) {
                return Err(invalid(format!("pixel with category {c} has instance {i}")));
            }
            if i > 0 && *cat_of.entry(i).or_insert(c) != c {
                return Err(invalid(format!("instance {i} spans several categories")));
            }
        }
        Ok(())
    }
}

/// Combines the semantic argmax with grouped instances: instances take the
/// majority category of their pixels (ties to the smaller id); instances
/// smaller than `min_area` and unclaimed thing pixels become void.
pub fn merge_panoptic(semantic: &Grid<u32>, instance: &Grid<u32>, cfg: &FusionConfig) -> Result<PanopticMap> {
    if !semantic.same_extent(instance) {
        return Err(invalid("semantic and instance grids differ in extent"));
    }
    let mut votes: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&s, &i) in semantic.data.iter().zip(&instance.data) {
        if i > 0 && cfg.is_thing(s) {
            *votes.entry(i).or_default().entry(s).or_default() += 1;
        }
    }
    let mut category_of: BTreeMap<u32, u32> = BTreeMap::new();
    for (id, v) in &votes {
        let area: usize = v.values().sum();
        if area < cfg.min_area.max(1) {
            continue;
        }
        let mut best = (0usize, u32::MAX);
        for (&class, &n) in v {
            if n > best.0 {
                best = (n, class);
            }
        }
        category_of.insert(*id, best.1);
    }
    let n = semantic.len();
    let mut category = Vec::with_capacity(n);
    let mut inst = Vec::with_capacity(n);
    for (&s, &i) in semantic.data.iter().zip(&instance.data) {
        if cfg.is_thing(s) {
            match category_of.get(&i) {
                Some(&c) if i > 0 => {
                    category.push(c);
                    inst.push(i);
                }
                _ => {
                    category.push(cfg.void_id);
                    inst.push(0);
                }
            }
        } else {
            category.push(s);
            inst.push(0);
        }
    }
    Ok(PanopticMap {
        category: Grid::from_vec(semantic.height, semantic.width, category),
        instance: Grid::from_vec(semantic.height, semantic.width, inst),
        orientations: BTreeMap::new(),
    })
}

/// Angle in `[0, 360)` degrees of a `(cos, sin)` vector.
pub fn angle_degrees(cos: f64, sin: f64) -> f64 {
    let a = sin.atan2(cos).to_degrees();
    let a = if a < 0.0 { a + 360.0 } else { a };
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// Mean `(cos, sin)` over each instance's pixels, as an angle; `None` when
/// the mean vector vanishes.
pub fn instance_orientation(orientation: &Grid<[f64; 2]>, instance: &Grid<u32>) -> BTreeMap<u32, Option<f64>> {
    let mut acc: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for (&id, v) in instance.data.iter().zip(&orientation.data) {
        if id > 0 {
            let e = acc.entry(id).or_insert((0.0, 0.0));
            e.0 += v[0];
            e.1 += v[1];
        }
    }
    acc.into_iter()
        .map(|(id, (c, s))| {
            let norm = c.hypot(s);
            (id, (norm > 1e-12).then(|| angle_degrees(c / norm, s / norm)))
        })
        .collect()
}

/// Full post-processing of one image's predictions.
pub fn fuse(
    semantic: &Grid<u32>,
    heatmap: &Grid<f64>,
    offsets: &Grid<[f64; 2]>,
    orientation: &Grid<[f64; 2]>,
    cfg: &FusionConfig,
) -> Result<PanopticMap> {
    let centers = find_centers(heatmap, cfg);
    let fg = Grid::from_vec(
        semantic.height,
        semantic.width,
        semantic.data.iter().map(|&s| cfg.is_thing(s)).collect(),
    );
    let grouped = group_pixels(&centers, offsets, &fg);
    let mut map = merge_panoptic(semantic, &grouped, cfg)?;
    map.orientations = instance_orientation(orientation, &map.instance);
    Ok(map)
}
