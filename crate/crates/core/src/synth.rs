//! Deterministic toy RGB-D scenes with semantic, instance, orientation and
//! scene-class labels.

use std::collections::BTreeMap;

use mtscene_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub stuff_classes: usize,
    pub thing_classes: usize,
    pub scene_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub min_area_fraction: f64,
    pub depth_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            stuff_classes: 2,
            thing_classes: 4,
            scene_classes: 4,
            min_objects: 1,
            max_objects: 4,
            min_size: 10,
            max_size: 22,
            min_area_fraction: 0.0025,
            depth_noise: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("generated images need positive extents"));
        }
        if self.stuff_classes == 0 || self.thing_classes == 0 || self.scene_classes == 0 {
            return Err(invalid("generator needs stuff, thing and scene classes"));
        }
        if self.min_objects > self.max_objects || self.min_size == 0 || self.min_size > self.max_size {
            return Err(invalid("generator object ranges are empty"));
        }
        if self.max_size > self.height.min(self.width) {
            return Err(invalid("objects larger than the image"));
        }
        let min_area = self.min_area_fraction * (self.height * self.width) as f64;
        // smallest ellipse the generator can draw
        let smallest = std::f64::consts::FRAC_PI_4 * (self.min_size * self.min_size) as f64 * 0.8;
        if smallest < min_area {
            return Err(invalid(format!(
                "objects of size {} cannot reach the minimum area of {min_area:.1} pixels",
                self.min_size
            )));
        }
        let demand = self.max_objects as f64 * (self.min_size * self.min_size) as f64;
        if demand > 0.4 * (self.height * self.width) as f64 {
            return Err(invalid(format!(
                "{} objects of size {} do not fit in {}x{}",
                self.max_objects, self.min_size, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.stuff_classes + self.thing_classes
    }

    pub fn min_area(&self) -> usize {
        (self.min_area_fraction * (self.height * self.width) as f64).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `3 x H x W` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `1 x H x W` in `[0, 1]`, larger is nearer.
    pub depth: Tensor<f32>,
    pub semantic: Grid<u32>,
    /// 0 marks pixels without an instance.
    pub instance: Grid<u32>,
    /// Degrees in `[0, 360)` per instance id.
    pub orientations: BTreeMap<u32, f64>,
    pub scene_class: u32,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.semantic.height
    }

    pub fn width(&self) -> usize {
        self.semantic.width
    }

    /// Checks the label invariants against a class partition.
    pub fn validate(&self, num_classes: usize, stuff_classes: usize, scene_classes: usize, min_area: usize) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.rgb.shape() != [3, h, w] || self.depth.shape() != [1, h, w] || !self.instance.same_extent(&self.semantic) {
            return Err(invalid("image and label extents disagree"));
        }
        if self.rgb.data().iter().chain(self.depth.data()).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("image values outside [0, 1]"));
        }
        if self.scene_class as usize >= scene_classes {
            return Err(invalid(format!("scene class {} out of range", self.scene_class)));
        }
        let mut area: BTreeMap<u32, usize> = BTreeMap::new();
        for (&s, &i) in self.semantic.data.iter().zip(&self.instance.data) {
            if s as usize >= num_classes {
                return Err(invalid(format!("semantic label {s} out of range")));
            }
            let thing = s as usize >= stuff_classes;
            if thing != (i > 0) {
                return Err(invalid(format!("class {s} pixel carries instance id {i}")));
            }
            if i > 0 {
                *area.entry(i).or_default() += 1;
            }
        }
        for (id, a) in area {
            if !self.orientations.contains_key(&id) {
                return Err(invalid(format!("instance {id} has no orientation entry")));
            }
            if a < min_area {
                return Err(invalid(format!("instance {id} covers {a} pixels, below {min_area}")));
            }
        }
        Ok(())
    }

    /// `1 x 4 x H x W` RGB-D input.
    pub fn rgbd(&self) -> Vec<f32> {
        let mut v = self.rgb.data().to_vec();
        v.extend_from_slice(self.depth.data());
        v
    }
}

fn stuff_color(class: usize, scene: usize) -> [f64; 3] {
    let t = (class * 7 + scene * 3) as f64;
    [
        0.25 + 0.2 * (t * 0.9).sin().abs(),
        0.25 + 0.2 * (t * 1.7 + 1.0).sin().abs(),
        0.25 + 0.2 * (t * 2.3 + 2.0).sin().abs(),
    ]
}

fn thing_color(class: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 6] = [
        [0.85, 0.2, 0.2],
        [0.2, 0.8, 0.25],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.15],
        [0.8, 0.25, 0.85],
        [0.15, 0.85, 0.85],
    ];
    let b = BASE[class % BASE.len()];
    let k = (class / BASE.len()) as f64 * 0.15;
    [(b[0] - k).max(0.1), (b[1] - k).max(0.1), (b[2] - k).max(0.1)]
}

struct Object {
    cy: f64,
    cx: f64,
    half_len: f64,
    half_wid: f64,
    angle: f64,
    ellipse: bool,
}

impl Object {
    /// Coordinates along and across the orientation axis, normalized to the
    /// half extents, if the pixel lies inside.
    fn local(&self, r: usize, c: usize) -> Option<(f64, f64)> {
        let (dy, dx) = (r as f64 + 0.5 - self.cy, c as f64 + 0.5 - self.cx);
        let (s, co) = self.angle.to_radians().sin_cos();
        // image rows grow downward; the orientation points up for 90 degrees
        let along = (dx * co - dy * s) / self.half_len;
        let across = (dx * s + dy * co) / self.half_wid;
        let inside = if self.ellipse {
            along * along + across * across <= 1.0
        } else {
            along.abs() <= 1.0 && across.abs() <= 1.0
        };
        inside.then_some((along, across))
    }
}

/// Generates one scene; identical seeds give identical samples.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let scene = rng.gen_range(0..cfg.scene_classes);

    // stuff: horizontal bands, the first at the top
    let mut bounds: Vec<usize> = (1..cfg.stuff_classes)
        .map(|i| {
            let nominal = i as f64 / cfg.stuff_classes as f64;
            let jitter = rng.gen_range(-0.1..0.1) / cfg.stuff_classes as f64;
            (((nominal + jitter) * h as f64).round() as usize).clamp(1, h - 1)
        })
        .collect();
    bounds.sort_unstable();
    let band = |r: usize| bounds.iter().filter(|&&b| r >= b).count();

    let mut semantic = Grid::from_vec(h, w, (0..h * w).map(|i| band(i / w) as u32).collect());
    let mut instance = Grid::filled(h, w, 0u32);
    let mut rgb = vec![0.0f64; 3 * h * w];
    let mut depth = vec![0.0f64; h * w];
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.04..0.04));
    for r in 0..h {
        let b = band(r);
        let base = stuff_color(b, scene);
        let d = if b == 0 {
            0.15 + 0.05 * (r as f64 / h as f64)
        } else {
            0.2 + 0.6 * (r as f64 / h as f64)
        };
        for c in 0..w {
            let i = r * w + c;
            let texture = 0.03 * ((r as f64 * 0.7 + c as f64 * 0.3 + scene as f64).sin());
            for ch in 0..3 {
                rgb[ch * h * w + i] = base[ch] + tint[ch] + texture;
            }
            depth[i] = d;
        }
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut orientations = BTreeMap::new();
    let mut placed = 0u32;
    let min_area = cfg.min_area();
    let mut attempts = 0;
    while (placed as usize) < count {
        attempts += 1;
        if attempts > 2000 {
            return Err(invalid(format!(
                "could not place {count} non-overlapping objects in {h}x{w}"
            )));
        }
        let class = (cfg.stuff_classes + rng.gen_range(0..cfg.thing_classes)) as u32;
        let len = rng.gen_range(cfg.min_size..=cfg.max_size);
        let wid = rng.gen_range(cfg.min_size..=len);
        let (half_len, half_wid) = (len as f64 / 2.0, wid as f64 / 2.0);
        let reach = half_len.hypot(half_wid) + 1.0;
        if 2.0 * reach >= h.min(w) as f64 {
            continue;
        }
        let obj = Object {
            cy: rng.gen_range(reach..h as f64 - reach),
            cx: rng.gen_range(reach..w as f64 - reach),
            half_len,
            half_wid,
            angle: rng.gen_range(0.0..360.0),
            ellipse: (class as usize - cfg.stuff_classes) % 2 == 1,
        };
        let pixels: Vec<(usize, f64)> = (0..h * w)
            .filter_map(|i| obj.local(i / w, i % w).map(|(a, _)| (i, a)))
            .collect();
        // keep a one-pixel gap to every earlier object
        let clash = pixels.iter().any(|&(i, _)| {
            let (r, c) = (i / w, i % w);
            (r.saturating_sub(1)..(r + 2).min(h))
                .any(|rr| (c.saturating_sub(1)..(c + 2).min(w)).any(|cc| *instance.get(rr, cc) != 0))
        });
        if clash || pixels.len() < min_area {
            continue;
        }
        placed += 1;
        let color = thing_color(class as usize - cfg.stuff_classes);
        let near = 0.55 + 0.35 * (obj.cy / h as f64);
        for &(i, along) in &pixels {
            instance.data[i] = placed;
            semantic.data[i] = class;
            // brighter toward the front so the heading is visible
            let shade = 0.8 + 0.2 * along;
            for ch in 0..3 {
                rgb[ch * h * w + i] = color[ch] * shade;
            }
            depth[i] = near + 0.05 * along;
        }
        orientations.insert(placed, obj.angle);
    }

    if cfg.depth_noise > 0.0 {
        for d in &mut depth {
            let n: f64 = rng.sample(StandardNormal);
            *d += cfg.depth_noise * n;
        }
    }
    let rgb = Tensor::new(&[3, h, w], rgb.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())?;
    let depth = Tensor::new(&[1, h, w], depth.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())?;
    Ok(SceneSample {
        rgb,
        depth,
        semantic,
        instance,
        orientations,
        scene_class: scene as u32,
    })
}

/// Scenes for seeds `seed, seed + 1, ...`, generated in parallel.
pub fn generate_set(seed: u64, count: usize, cfg: &GenConfig) -> Result<Vec<SceneSample>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(seed.wrapping_add(i), cfg))
        .collect()
}

pub fn semantic_class_names(stuff: usize, things: usize) -> Vec<String> {
    const STUFF: [&str; 2] = ["wall", "floor"];
    const THINGS: [&str; 4] = ["chair", "table", "bed", "lamp"];
    let name = |list: &[&str], i: usize, prefix: &str| {
        list.get(i)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("{prefix}{i}"))
    };
    (0..stuff)
        .map(|i| name(&STUFF, i, "stuff"))
        .chain((0..things).map(|i| name(&THINGS, i, "thing")))
        .collect()
}

pub fn scene_class_names(n: usize) -> Vec<String> {
    const SCENES: [&str; 4] = ["bedroom", "office", "kitchen", "living_room"];
    (0..n)
        .map(|i| SCENES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("scene{i}")))
        .collect()
}
