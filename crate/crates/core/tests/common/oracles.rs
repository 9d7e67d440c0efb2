//! Brute-force reference implementations shared by the fusion tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mtscene::fusion::PanopticMap;
use mtscene::grid::Grid;
use mtscene::metrics::ClassSets;
use rand::Rng;

/// Peaks of a full max-filter pass, first-in-row-major among equal values.
pub fn find_centers_oracle(heat: &Grid<f64>, threshold: f64, kernel: usize, top_k: usize) -> Vec<(usize, usize, f64)> {
    let (h, w) = (heat.height, heat.width);
    let r = (kernel / 2) as isize;
    let window = |row: usize, col: usize| {
        let mut cells = Vec::new();
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (row as isize + dr, col as isize + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    cells.push((rr as usize, cc as usize));
                }
            }
        }
        cells
    };
    let mut maxf = Grid::filled(h, w, f64::NEG_INFINITY);
    for row in 0..h {
        for col in 0..w {
            let m = window(row, col).iter().map(|&(a, b)| *heat.get(a, b)).fold(f64::NEG_INFINITY, f64::max);
            maxf.set(row, col, m);
        }
    }
    let mut peaks = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let v = *heat.get(row, col);
            if v < threshold || v != *maxf.get(row, col) {
                continue;
            }
            let shadowed = window(row, col)
                .iter()
                .any(|&(a, b)| (a * w + b) < (row * w + col) && *heat.get(a, b) == v);
            if !shadowed {
                peaks.push((row, col, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    peaks.truncate(top_k);
    peaks
}

/// Every foreground pixel goes to the lowest-index center among those at
/// minimal distance from `p + offset(p)`.
pub fn group_oracle(centers: &[(usize, usize)], offsets: &Grid<[f64; 2]>, fg: &Grid<bool>) -> Grid<u32> {
    let mut out = Grid::filled(fg.height, fg.width, 0u32);
    if centers.is_empty() {
        return out;
    }
    for row in 0..fg.height {
        for col in 0..fg.width {
            if !*fg.get(row, col) {
                continue;
            }
            let o = offsets.get(row, col);
            let (y, x) = (row as f64 + o[0], col as f64 + o[1]);
            let d: Vec<f64> = centers
                .iter()
                .map(|&(r, c)| (y - r as f64) * (y - r as f64) + (x - c as f64) * (x - c as f64))
                .collect();
            let best = d.iter().copied().fold(f64::INFINITY, f64::min);
            let idx = d.iter().position(|&v| v == best).unwrap();
            out.set(row, col, idx as u32 + 1);
        }
    }
    out
}

/// Per class: sorted TP IoUs, FP count, FN count. Every segment pair is
/// compared over the full image.
pub fn pq_oracle(pred: &PanopticMap, truth: &PanopticMap, classes: &ClassSets) -> Vec<(Vec<f64>, usize, usize)> {
    let n = truth.category.len();
    let valid: Vec<bool> = (0..n).map(|i| truth.category.data[i] != classes.void_id).collect();
    let key = |m: &PanopticMap, i: usize| {
        let c = m.category.data[i];
        (c, if classes.is_thing(c) { m.instance.data[i] } else { 0 })
    };
    let mut pred_segs: Vec<(u32, u32)> = (0..n)
        .filter(|&i| valid[i] && pred.category.data[i] != classes.void_id)
        .map(|i| key(pred, i))
        .collect();
    pred_segs.sort_unstable();
    pred_segs.dedup();
    let mut true_segs: Vec<(u32, u32)> = (0..n).filter(|&i| valid[i]).map(|i| key(truth, i)).collect();
    true_segs.sort_unstable();
    true_segs.dedup();

    let mut out = vec![(Vec::new(), 0, 0); classes.num_classes];
    let mut pred_hit = vec![false; pred_segs.len()];
    let mut true_hit = vec![false; true_segs.len()];
    for (pi, p) in pred_segs.iter().enumerate() {
        for (ti, t) in true_segs.iter().enumerate() {
            if p.0 != t.0 {
                continue;
            }
            let (mut inter, mut union) = (0u64, 0u64);
            for i in (0..n).filter(|&i| valid[i]) {
                let a = pred.category.data[i] != classes.void_id && key(pred, i) == *p;
                let b = key(truth, i) == *t;
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
            if 2 * inter > union {
                out[t.0 as usize].0.push(inter as f64 / union as f64);
                pred_hit[pi] = true;
                true_hit[ti] = true;
            }
        }
    }
    for (p, hit) in pred_segs.iter().zip(&pred_hit) {
        if !hit {
            out[p.0 as usize].1 += 1;
        }
    }
    for (t, hit) in true_segs.iter().zip(&true_hit) {
        if !hit {
            out[t.0 as usize].2 += 1;
        }
    }
    for c in out.iter_mut() {
        c.0.sort_by(f64::total_cmp);
    }
    out
}

/// Stuff classes 0 and 1, thing classes 2..6.
pub fn classes() -> ClassSets {
    ClassSets {
        num_classes: 6,
        things: vec![2, 3, 4, 5],
        void_id: 255,
    }
}

/// Random stuff background with up to five thing rectangles.
pub fn random_panoptic(rng: &mut impl Rng, h: usize, w: usize) -> PanopticMap {
    let split = rng.gen_range(0..h);
    let mut category = Grid::from_vec(h, w, (0..h * w).map(|i| if i / w < split { 0 } else { 1 }).collect());
    let mut instance = Grid::filled(h, w, 0u32);
    for id in 1..=rng.gen_range(0..=5u32) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (r1, c1) = ((r0 + rng.gen_range(1..8)).min(h), (c0 + rng.gen_range(1..8)).min(w));
        let class = rng.gen_range(2..6u32);
        for r in r0..r1 {
            for c in c0..c1 {
                category.set(r, c, class);
                instance.set(r, c, id);
            }
        }
    }
    PanopticMap {
        category,
        instance,
        orientations: BTreeMap::new(),
    }
}

/// Copy of `m` with some pixels relabelled and some instances renumbered,
/// keeping `instance > 0` exactly on thing pixels.
pub fn perturb(rng: &mut impl Rng, m: &PanopticMap, void_rate: f64, noise_rate: f64) -> PanopticMap {
    let mut out = m.clone();
    let remap: Vec<u32> = (0..=16u32).map(|i| if i == 0 { 0 } else { i * 3 + rng.gen_range(0..3) }).collect();
    for i in 0..out.category.len() {
        let inst = out.instance.data[i];
        if inst > 0 {
            out.instance.data[i] = remap[inst as usize];
        }
        if rng.gen_bool(noise_rate) {
            let c = rng.gen_range(0..6u32);
            out.category.data[i] = c;
            out.instance.data[i] = if c >= 2 { rng.gen_range(1..4) } else { 0 };
        } else if rng.gen_bool(void_rate) {
            out.category.data[i] = 255;
            out.instance.data[i] = 0;
        }
    }
    out
}
