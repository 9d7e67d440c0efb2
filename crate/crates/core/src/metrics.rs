//! mIoU, panoptic quality, orientation error and balanced accuracy, with
//! mergeable accumulators.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::fusion::PanopticMap;
use crate::grid::Grid;

/// Class partition shared by the panoptic metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSets {
    pub num_classes: usize,
    pub things: Vec<u32>,
    pub void_id: u32,
}

impl ClassSets {
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_classes];
        for &t in &self.things {
            let slot = seen
                .get_mut(t as usize)
                .ok_or_else(|| invalid(format!("thing class {t} outside {} classes", self.num_classes)))?;
            if *slot {
                return Err(invalid(format!("thing class {t} listed twice")));
            }
            *slot = true;
        }
        if (self.void_id as usize) < self.num_classes {
            return Err(invalid("void id collides with a class id"));
        }
        Ok(())
    }

    pub fn is_thing(&self, c: u32) -> bool {
        self.things.contains(&c)
    }
}

/// Angular distance in degrees with wraparound, in `[0, 180]`.
pub fn angular_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouResult {
    pub miou: f64,
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
}

/// Pixel confusion counts, `truth x pred`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
    /// Valid truth pixels whose prediction is not a class.
    unassigned: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            unassigned: vec![0; k],
        }
    }

    pub fn add(&mut self, pred: &Grid<u32>, truth: &Grid<u32>, ignore_id: u32) -> Result<()> {
        if !pred.same_extent(truth) {
            return Err(invalid("prediction and truth differ in extent"));
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == ignore_id {
                continue;
            }
            let t = t as usize;
            if t >= self.k {
                return Err(invalid(format!("truth label {t} outside {} classes", self.k)));
            }
            if (p as usize) < self.k {
                self.counts[t * self.k + p as usize] += 1;
            } else {
                self.unassigned[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unassigned.iter_mut().zip(&other.unassigned) {
            *a += b;
        }
    }

    /// Truth pixels per class.
    pub fn support(&self) -> Vec<u64> {
        (0..self.k)
            .map(|t| self.counts[t * self.k..(t + 1) * self.k].iter().sum::<u64>() + self.unassigned[t])
            .collect()
    }

    pub fn iou(&self) -> Result<IouResult> {
        let k = self.k;
        let support = self.support();
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.counts[t * k + c]).sum();
                let fn_ = support[c] - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(invalid("mIoU undefined: no class present"));
        }
        Ok(IouResult {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

pub fn miou(pred: &Grid<u32>, truth: &Grid<u32>, num_classes: usize, ignore_id: u32) -> Result<IouResult> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, truth, ignore_id)?;
    c.iou()
}

/// Matching outcome of one class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassPq {
    pub tp_ious: Vec<f64>,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassPq {
    pub fn tp(&self) -> usize {
        self.tp_ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tp() + self.fp + self.fn_ == 0
    }

    /// `(PQ, SQ, RQ)` with `PQ = SQ * RQ`.
    pub fn scores(&self) -> (f64, f64, f64) {
        let tp = self.tp();
        if tp == 0 {
            return (0.0, 0.0, 0.0);
        }
        let mut ious = self.tp_ious.clone();
        ious.sort_by(f64::total_cmp);
        let sq = ious.iter().sum::<f64>() / tp as f64;
        let rq = tp as f64 / (tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        (sq * rq, sq, rq)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqResult {
    pub per_class: Vec<ClassPq>,
    /// `(predicted instance, true instance)` pairs of thing-class TPs.
    pub matches: Vec<(u32, u32)>,
}

/// Averages of `(PQ, SQ, RQ)` over the classes selected by `keep` that
/// occur in prediction or truth.
pub fn average_pq(per_class: &[ClassPq], keep: impl Fn(u32) -> bool) -> Option<(f64, f64, f64)> {
    let scores: Vec<(f64, f64, f64)> = per_class
        .iter()
        .enumerate()
        .filter(|(c, s)| keep(*c as u32) && !s.is_empty())
        .map(|(_, s)| s.scores())
        .collect();
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
        scores.iter().map(|s| s.2).sum::<f64>() / n,
    ))
}

type SegKey = (u32, u32);

/// Matches segments `(category, instance)` within each class at IoU > 0.5.
/// Pixels whose truth is void are excluded from every segment.
pub fn panoptic_quality(pred: &PanopticMap, truth: &PanopticMap, classes: &ClassSets) -> Result<PqResult> {
    classes.validate()?;
    if !pred.category.same_extent(&truth.category) || !pred.category.same_extent(&pred.instance) {
        return Err(invalid("panoptic maps differ in extent"));
    }
    let seg = |c: u32, i: u32| -> Result<Option<SegKey>> {
        if c == classes.void_id {
            return Ok(None);
        }
        if c as usize >= classes.num_classes {
            return Err(invalid(format!("category {c} outside {} classes", classes.num_classes)));
        }
        Ok(Some((c, if classes.is_thing(c) { i } else { 0 })))
    };
    let mut pred_area: BTreeMap<SegKey, u64> = BTreeMap::new();
    let mut true_area: BTreeMap<SegKey, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(SegKey, SegKey), u64> = BTreeMap::new();
    for idx in 0..truth.category.len() {
        let Some(t) = seg(truth.category.data[idx], truth.instance.data[idx])? else {
            continue;
        };
        *true_area.entry(t).or_default() += 1;
        if let Some(p) = seg(pred.category.data[idx], pred.instance.data[idx])? {
            *pred_area.entry(p).or_default() += 1;
            if p.0 == t.0 {
                *inter.entry((p, t)).or_default() += 1;
            }
        }
    }
    let mut per_class = vec![ClassPq::default(); classes.num_classes];
    let mut matched_pred = BTreeSet::new();
    let mut matched_true = BTreeSet::new();
    let mut matches = Vec::new();
    for (&(p, t), &i) in &inter {
        let union = pred_area[&p] + true_area[&t] - i;
        // IoU > 0.5 without rounding: 2 * i > union
        if 2 * i > union {
            per_class[t.0 as usize].tp_ious.push(i as f64 / union as f64);
            matched_pred.insert(p);
            matched_true.insert(t);
            if classes.is_thing(t.0) {
                matches.push((p.1, t.1));
            }
        }
    }
    for p in pred_area.keys().filter(|p| !matched_pred.contains(p)) {
        per_class[p.0 as usize].fp += 1;
    }
    for t in true_area.keys().filter(|t| !matched_true.contains(t)) {
        per_class[t.0 as usize].fn_ += 1;
    }
    Ok(PqResult { per_class, matches })
}

/// Mean wraparound angular error over matched instances; an undefined
/// predicted orientation counts as the maximum error of 180 degrees.
/// `None` when no match carries a true orientation.
pub fn maae(
    pred: &BTreeMap<u32, Option<f64>>,
    truth: &BTreeMap<u32, f64>,
    matches: &[(u32, u32)],
) -> Option<f64> {
    let errs = orientation_errors(pred, truth, matches);
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

fn orientation_errors(pred: &BTreeMap<u32, Option<f64>>, truth: &BTreeMap<u32, f64>, matches: &[(u32, u32)]) -> Vec<f64> {
    matches
        .iter()
        .filter_map(|(p, t)| {
            let t = truth.get(t)?;
            Some(match pred.get(p).copied().flatten() {
                Some(a) => angular_error(a, *t),
                None => 180.0,
            })
        })
        .collect()
}

/// Mean recall over classes with at least one true sample.
pub fn balanced_accuracy(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<f64> {
    if truth.is_empty() || pred.len() != truth.len() {
        return Err(invalid("balanced accuracy needs equal-length, nonempty label lists"));
    }
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        let t = t as usize;
        if t >= num_classes {
            return Err(invalid(format!("scene label {t} outside {num_classes} classes")));
        }
        total[t] += 1;
        hit[t] += (p as usize == t) as usize;
    }
    let recalls: Vec<f64> = (0..num_classes)
        .filter(|&c| total[c] > 0)
        .map(|c| hit[c] as f64 / total[c] as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Everything needed to score one image.
pub struct ImageEval<'a> {
    pub semantic_pred: &'a Grid<u32>,
    pub semantic_truth: &'a Grid<u32>,
    pub panoptic_pred: &'a PanopticMap,
    pub panoptic_truth: &'a PanopticMap,
    pub orientations_truth: &'a BTreeMap<u32, f64>,
    pub scene_pred: u32,
    pub scene_truth: u32,
}

/// Per-dataset statistics; merging is associative.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalAccumulator {
    classes: ClassSets,
    scene_classes: usize,
    confusion: Confusion,
    pq: Vec<ClassPq>,
    angle_errors: Vec<f64>,
    scenes: Vec<(u32, u32)>,
}

impl EvalAccumulator {
    pub fn new(classes: ClassSets, scene_classes: usize) -> Result<Self> {
        classes.validate()?;
        Ok(Self {
            confusion: Confusion::new(classes.num_classes),
            pq: vec![ClassPq::default(); classes.num_classes],
            classes,
            scene_classes,
            angle_errors: Vec::new(),
            scenes: Vec::new(),
        })
    }

    pub fn add(&mut self, e: &ImageEval<'_>) -> Result<()> {
        self.confusion
            .add(e.semantic_pred, e.semantic_truth, self.classes.void_id)?;
        let pq = panoptic_quality(e.panoptic_pred, e.panoptic_truth, &self.classes)?;
        for (acc, c) in self.pq.iter_mut().zip(pq.per_class) {
            acc.tp_ious.extend(c.tp_ious);
            acc.fp += c.fp;
            acc.fn_ += c.fn_;
        }
        self.angle_errors.extend(orientation_errors(
            &e.panoptic_pred.orientations,
            e.orientations_truth,
            &pq.matches,
        ));
        self.scenes.push((e.scene_pred, e.scene_truth));
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.confusion.merge(&other.confusion);
        for (a, b) in self.pq.iter_mut().zip(&other.pq) {
            a.tp_ious.extend_from_slice(&b.tp_ious);
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        self.angle_errors.extend_from_slice(&other.angle_errors);
        self.scenes.extend_from_slice(&other.scenes);
    }

    pub fn report(&self) -> Result<MetricReport> {
        let iou = self.confusion.iou()?;
        let all = average_pq(&self.pq, |_| true).unwrap_or_default();
        let things = average_pq(&self.pq, |c| self.classes.is_thing(c)).unwrap_or_default();
        let stuff = average_pq(&self.pq, |c| !self.classes.is_thing(c)).unwrap_or_default();
        let (pred, truth): (Vec<u32>, Vec<u32>) = self.scenes.iter().copied().unzip();
        let mut errs = self.angle_errors.clone();
        errs.sort_by(f64::total_cmp);
        Ok(MetricReport {
            miou: iou.miou,
            per_class_iou: iou.per_class,
            pq: all.0,
            sq: all.1,
            rq: all.2,
            pq_things: things.0,
            sq_things: things.1,
            rq_things: things.2,
            pq_stuff: stuff.0,
            per_class_pq: self.pq.iter().map(ClassPq::scores).collect(),
            maae: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
            maae_matches: errs.len(),
            bacc: balanced_accuracy(&pred, &truth, self.scene_classes)?,
            support: self.confusion.support(),
            images: self.scenes.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub sq_things: f64,
    pub rq_things: f64,
    pub pq_stuff: f64,
    pub per_class_pq: Vec<(f64, f64, f64)>,
    pub maae: Option<f64>,
    pub maae_matches: usize,
    pub bacc: f64,
    pub support: Vec<u64>,
    pub images: usize,
}

impl MetricReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images={}", self.images);
        let _ = writeln!(s, "semantic.miou={:.6}", self.miou);
        for (k, v) in [
            ("panoptic.pq", self.pq),
            ("panoptic.sq", self.sq),
            ("panoptic.rq", self.rq),
            ("panoptic.things.pq", self.pq_things),
            ("panoptic.things.sq", self.sq_things),
            ("panoptic.things.rq", self.rq_things),
            ("panoptic.stuff.pq", self.pq_stuff),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        match self.maae {
            Some(m) => {
                let _ = writeln!(s, "orientation.maae={m:.6}");
            }
            None => s.push_str("orientation.maae=absent\n"),
        }
        let _ = writeln!(s, "orientation.matches={}", self.maae_matches);
        let _ = writeln!(s, "scene.bacc={:.6}", self.bacc);
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "class.{c}.iou={v:.6}");
                }
                None => {
                    let _ = writeln!(s, "class.{c}.iou=absent");
                }
            }
            let (pq, sq, rq) = self.per_class_pq[c];
            let _ = writeln!(s, "class.{c}.pq={pq:.6}");
            let _ = writeln!(s, "class.{c}.sq={sq:.6}");
            let _ = writeln!(s, "class.{c}.rq={rq:.6}");
            let _ = writeln!(s, "class.{c}.support={}", self.support[c]);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let maae = self
            .maae
            .map(|m| format!("{m:.2} deg"))
            .unwrap_or_else(|| "absent".into());
        let _ = writeln!(s, "images          {}", self.images);
        let _ = writeln!(s, "mIoU            {:.4}", self.miou);
        let _ = writeln!(s, "PQ / SQ / RQ    {:.4} / {:.4} / {:.4}", self.pq, self.sq, self.rq);
        let _ = writeln!(
            s,
            "things PQ/SQ/RQ {:.4} / {:.4} / {:.4}",
            self.pq_things, self.sq_things, self.rq_things
        );
        let _ = writeln!(s, "stuff PQ        {:.4}", self.pq_stuff);
        let _ = writeln!(s, "MAAE            {maae} ({} matches)", self.maae_matches);
        let _ = writeln!(s, "scene bAcc      {:.4}", self.bacc);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>5} {:>8} {:>8} {:>8} {:>8} {:>10}", "class", "IoU", "PQ", "SQ", "RQ", "pixels");
        for c in 0..self.per_class_iou.len() {
            let iou = self.per_class_iou[c]
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into());
            let (pq, sq, rq) = self.per_class_pq[c];
            let _ = writeln!(
                s,
                "{c:>5} {iou:>8} {pq:>8.4} {sq:>8.4} {rq:>8.4} {:>10}",
                self.support[c]
            );
        }
        s
    }
}
