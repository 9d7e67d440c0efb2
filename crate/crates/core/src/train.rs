//! Training loop, checkpoints, inference and dataset evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mtscene_tensor::{Graph, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{format_err, invalid, Error, Result};
use crate::fusion::{fuse, PanopticMap};
use crate::grid::Grid;
use crate::instance::InstanceConfig;
use crate::io::{read_checkpoint, write_checkpoint, Dataset, Manifest};
use crate::losses::{center_loss, offset_loss, orientation_loss_dense, scene_loss, semantic_loss};
use crate::metrics::{ClassSets, EvalAccumulator, ImageEval, MetricReport};
use crate::model::{forward, init_params};
use crate::params::{Ctx, ParamKind, ParamStore};
use crate::scheduler::{weighted_total_graph, SchedulerState, NUM_TASKS, TASK_NAMES};
use crate::synth::SceneSample;
use crate::targets::{encode_center_targets, orientation_targets};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Parameter updates, one per batch.
    pub iterations: usize,
    pub seed: u64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            iterations: 500,
            seed: 0,
            cosine: false,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid("train.lr must be positive, momentum in [0, 1), weight_decay nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.cosine && self.iterations > 0 {
            let t = iteration as f64 / self.iterations as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.lr
        }
    }
}

/// Targets of one sample at one head level.
#[derive(Clone, Debug)]
struct LevelTargets {
    heatmap: Vec<f32>,
    offsets: Vec<f32>,
    valid: Vec<bool>,
    orientation: Vec<f32>,
    orient_mask: Vec<bool>,
}

/// A sample converted to network inputs and per-level targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    rgbd: Vec<f32>,
    semantic: Vec<u32>,
    levels: Vec<LevelTargets>,
    scene: u32,
}

pub fn prepare(sample: &SceneSample, cfg: &Config) -> Prepared {
    let levels = cfg
        .model
        .instance
        .head_layers()
        .into_iter()
        .map(|l| {
            let f = InstanceConfig::layer_factor(l);
            let inst = sample.instance.downsample_nearest(f);
            let ct = encode_center_targets(&inst, cfg.losses.center_sigma / f as f64);
            let (orientation, orient_mask) = orientation_targets(&inst, &sample.orientations);
            let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            LevelTargets {
                heatmap: f32s(&ct.heatmap),
                offsets: f32s(&ct.offsets),
                valid: ct.valid,
                orientation: f32s(&orientation),
                orient_mask,
            }
        })
        .collect();
    Prepared {
        rgbd: sample.rgbd(),
        semantic: sample.semantic.data.clone(),
        levels,
        scene: sample.scene_class,
    }
}

/// Checks that a dataset matches the class layout and input constraints of a
/// config.
pub fn check_compatible(cfg: &Config, m: &Manifest) -> Result<()> {
    let model = &cfg.model;
    if m.semantic_classes.len() != model.semantic.num_classes
        || m.thing_classes != model.thing_classes()
        || m.scene_classes.len() != model.scene_classes
    {
        return Err(invalid(format!(
            "class counts differ: dataset has {} semantic ({} things) and {} scene classes, model expects {} ({} things) and {}",
            m.semantic_classes.len(),
            m.thing_classes.len(),
            m.scene_classes.len(),
            model.semantic.num_classes,
            model.thing_classes().len(),
            model.scene_classes
        )));
    }
    let s = crate::encoder::EncoderConfig::STRIDE;
    if m.height % s != 0 || m.width % s != 0 {
        return Err(invalid(format!("image extent {}x{} is not divisible by {s}", m.height, m.width)));
    }
    Ok(())
}

fn batch_input(batch: &[&Prepared], h: usize, w: usize) -> Result<Tensor<f32>> {
    let data = batch.iter().flat_map(|p| p.rgbd.iter().copied()).collect();
    Ok(Tensor::new(&[batch.len(), 4, h, w], data)?)
}

/// Mean over levels that have at least one valid pixel; zero when none do.
fn level_mean(g: &mut Graph<f32>, parts: Vec<Var>) -> Result<Var> {
    let Some((&first, rest)) = parts.split_first() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &p in rest {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f32)?)
}

/// Turns an overflow inside the computation of loss `k` into a divergence
/// error naming the batch and the loss.
fn attribute<R>(r: Result<R>, batch: usize, k: usize) -> Result<R> {
    r.map_err(|e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
            batch,
            loss: TASK_NAMES[k],
        },
        e => e,
    })
}

/// The five task losses on a batch, in scheduler order.
fn batch_losses(g: &mut Graph<f32>, ctx_out: &crate::model::Outputs, batch: &[&Prepared], cfg: &Config, it: usize) -> Result<[Var; NUM_TASKS]> {
    let labels: Vec<u32> = batch.iter().flat_map(|p| p.semantic.iter().copied()).collect();
    let l_se = attribute(semantic_loss(g, ctx_out.semantic, &labels, cfg.losses.ignore_id), it, 0)?;
    let (mut ce, mut of, mut or) = (Vec::new(), Vec::new(), Vec::new());
    for (i, lv) in ctx_out.instance.levels.iter().enumerate() {
        let shape = g.shape(lv.center).to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let gather = |f: &dyn Fn(&LevelTargets) -> &[f32]| -> Vec<f32> {
            batch.iter().flat_map(|p| f(&p.levels[i]).iter().copied()).collect()
        };
        let masks = |f: &dyn Fn(&LevelTargets) -> &[bool]| -> Vec<bool> {
            batch.iter().flat_map(|p| f(&p.levels[i]).iter().copied()).collect()
        };
        let heat = g.constant(Tensor::new(&[n, 1, h, w], gather(&|t| &t.heatmap))?);
        ce.push(attribute(center_loss(g, lv.center, heat), it, 1)?);
        let valid = masks(&|t| &t.valid);
        if valid.iter().any(|&v| v) {
            let off = g.constant(Tensor::new(&[n, 2, h, w], gather(&|t| &t.offsets))?);
            of.push(attribute(offset_loss(g, lv.offset, off, &valid), it, 2)?);
        }
        let omask = masks(&|t| &t.orient_mask);
        if omask.iter().any(|&v| v) {
            let ot = g.constant(Tensor::new(&[n, 2, h, w], gather(&|t| &t.orientation))?);
            or.push(attribute(orientation_loss_dense(g, lv.orientation, ot, &omask, cfg.losses.kappa), it, 3)?);
        }
    }
    let l_ce = attribute(level_mean(g, ce), it, 1)?;
    let l_of = attribute(level_mean(g, of), it, 2)?;
    let l_or = attribute(level_mean(g, or), it, 3)?;
    let scenes: Vec<u32> = batch.iter().map(|p| p.scene).collect();
    let l_sc = attribute(scene_loss(g, ctx_out.scene, &scenes), it, 4)?;
    Ok([l_se, l_ce, l_of, l_or, l_sc])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub losses: [f64; NUM_TASKS],
    pub weights: [f64; NUM_TASKS],
    pub total: f64,
}

pub fn log_header() -> String {
    let l: Vec<String> = TASK_NAMES.iter().map(|t| format!("L_{t}")).collect();
    let w: Vec<String> = TASK_NAMES.iter().map(|t| format!("W_{t}")).collect();
    format!("iteration,{},{},total", l.join(","), w.join(","))
}

pub fn log_text(rows: &[LogRow]) -> String {
    let mut s = log_header();
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.iteration);
        for v in r.losses.iter().chain(&r.weights) {
            let _ = write!(s, ",{v:.9e}");
        }
        let _ = writeln!(s, ",{:.9e}", r.total);
    }
    s
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub log: Vec<LogRow>,
    pub scheduler: SchedulerState,
}

/// Runs `f` on a pool of `threads` workers (0 = rayon default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains a freshly initialized model.
pub fn train(cfg: &Config, data: &Dataset) -> Result<TrainOutcome> {
    let params = init_params(&cfg.model, cfg.train.seed)?;
    train_from(cfg, data, params, |_| {})
}

/// Trains `params` in place, calling `on_row` after every batch.
pub fn train_from(cfg: &Config, data: &Dataset, mut params: ParamStore<f32>, mut on_row: impl FnMut(&LogRow) + Send) -> Result<TrainOutcome> {
    check_compatible(cfg, &data.manifest)?;
    if data.samples.is_empty() {
        return Err(invalid("training needs at least one sample"));
    }
    let tc = &cfg.train;
    with_threads(tc.threads, || {
        let prepared: Vec<Prepared> = data.samples.iter().map(|s| prepare(s, cfg)).collect();
        let (h, w) = (data.manifest.height, data.manifest.width);
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7472_6169_6e00);
        let mut order: Vec<usize> = Vec::new();
        let mut velocity: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut sched = SchedulerState::new(cfg.scheduler.clone());
        let mut log = Vec::with_capacity(tc.iterations);
        for it in 0..tc.iterations {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
            }
            let take = tc.batch_size.min(order.len());
            let idx: Vec<usize> = order.drain(..take).collect();
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &prepared[i]).collect();

            let mut g = Graph::new();
            let x = g.constant(batch_input(&batch, h, w)?);
            let mut ctx = Ctx::new(&mut g, &params, true, cfg.model.norm);
            let out = forward(&mut ctx, &cfg.model, x).map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged { batch: it, op },
                e => e,
            })?;
            let updates = ctx.take_updates();
            let bound = ctx.bound().clone();
            drop(ctx);
            let losses = batch_losses(&mut g, &out, &batch, cfg, it)?;
            let mut values = [0.0; NUM_TASKS];
            for (k, &l) in losses.iter().enumerate() {
                let v = g.value(l).item()? as f64;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        batch: it,
                        loss: TASK_NAMES[k],
                    });
                }
                values[k] = v;
            }
            let weights = sched.weights();
            let total = weighted_total_graph(&mut g, &losses, &weights)?;
            let total_value = g.value(total).item()? as f64;
            let grads = g.backward(total)?;

            let lr = tc.lr_at(it) as f32;
            let (mu, wd) = (tc.momentum as f32, tc.weight_decay as f32);
            for (name, var) in &bound {
                if params.kind(name) != Some(ParamKind::Trainable) {
                    continue;
                }
                let Some(grad) = grads.get(*var) else { continue };
                let p = params.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
                let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                    *vv = mu * *vv + gv + wd * *pv;
                    *pv -= lr * *vv;
                }
            }
            params.apply_running_stats(updates)?;
            sched.observe(&values)?;
            let row = LogRow {
                iteration: it,
                losses: values,
                weights,
                total: total_value,
            };
            on_row(&row);
            log.push(row);
        }
        Ok(TrainOutcome {
            params,
            log,
            scheduler: sched,
        })
    })?
}

/// Mean of each log column over consecutive groups of `per_epoch` rows.
pub fn epoch_means(rows: &[LogRow], per_epoch: usize) -> Vec<f64> {
    rows.chunks(per_epoch.max(1))
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect()
}

pub const CONFIG_ENTRY: &str = "meta.config";

/// Parameters and buffers in name order, plus the config text.
pub fn save_checkpoint(path: &Path, cfg: &Config, params: &ParamStore<f32>) -> Result<()> {
    let text = cfg.to_text();
    let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
    let mut entries = vec![(CONFIG_ENTRY.to_string(), Tensor::new(&[bytes.len().max(1)], if bytes.is_empty() { vec![0.0] } else { bytes })?)];
    entries.extend(params.iter().map(|(n, _, t)| (n.to_string(), t.clone())));
    write_checkpoint(path, &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<(Config, ParamStore<f32>)> {
    let mut entries: BTreeMap<String, Tensor<f32>> = read_checkpoint(path)?.into_iter().collect();
    let meta = entries
        .remove(CONFIG_ENTRY)
        .ok_or_else(|| format_err(path, "checkpoint lacks its config"))?;
    let bytes: Vec<u8> = meta.data().iter().map(|&b| b as u8).filter(|&b| b != 0).collect();
    let text = String::from_utf8(bytes).map_err(|_| format_err(path, "embedded config is not UTF-8"))?;
    let cfg = Config::parse(&text)?;
    let template = init_params::<f32>(&cfg.model, 0)?;
    let mut params = ParamStore::new();
    for (name, kind, t) in template.iter() {
        let stored = entries
            .remove(name)
            .ok_or_else(|| format_err(path, format!("missing tensor `{name}`")))?;
        if stored.shape() != t.shape() {
            return Err(format_err(
                path,
                format!("tensor `{name}` has shape {:?}, expected {:?}", stored.shape(), t.shape()),
            ));
        }
        params.insert(name, kind, stored);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(format_err(path, format!("unexpected tensor `{extra}`")));
    }
    Ok((cfg, params))
}

/// Post-processed outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub semantic: Grid<u32>,
    pub panoptic: PanopticMap,
    pub scene: u32,
}

fn argmax(v: impl Iterator<Item = f32>) -> u32 {
    let mut best = (f32::NEG_INFINITY, 0u32);
    for (i, x) in v.enumerate() {
        if x > best.0 {
            best = (x, i as u32);
        }
    }
    best.1
}

/// Inference in evaluation mode on `samples`, `batch_size` at a time.
pub fn predict(cfg: &Config, params: &ParamStore<f32>, samples: &[SceneSample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.train.batch_size.max(1)) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        if chunk.iter().any(|s| s.height() != h || s.width() != w) {
            return Err(invalid("samples in one batch differ in extent"));
        }
        let data = chunk.iter().flat_map(SceneSample::rgbd).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[chunk.len(), 4, h, w], data)?);
        let mut ctx = Ctx::new(&mut g, params, false, cfg.model.norm);
        let o = forward(&mut ctx, &cfg.model, x)?;
        drop(ctx);
        let last = *o.instance.levels.last().ok_or_else(|| invalid("instance decoder has no heads"))?;
        let center = g.upsample_bilinear(last.center, h, w)?;
        let offset = g.upsample_bilinear(last.offset, h, w)?;
        let offset = g.scale(offset, last.factor as f32)?;
        let orient = g.upsample_bilinear(last.orientation, h, w)?;
        let (sem, scene) = (g.value(o.semantic), g.value(o.scene));
        let (center, offset, orient) = (g.value(center), g.value(offset), g.value(orient));
        let k = cfg.model.semantic.num_classes;
        let hw = h * w;
        for n in 0..chunk.len() {
            let logits = &sem.data()[n * k * hw..(n + 1) * k * hw];
            let semantic = Grid::from_vec(h, w, (0..hw).map(|p| argmax((0..k).map(|c| logits[c * hw + p]))).collect());
            let heat = Grid::from_vec(h, w, center.data()[n * hw..(n + 1) * hw].iter().map(|&v| v as f64).collect());
            let pair = |t: &Tensor<f32>| {
                let d = &t.data()[n * 2 * hw..(n + 1) * 2 * hw];
                Grid::from_vec(h, w, (0..hw).map(|p| [d[p] as f64, d[hw + p] as f64]).collect())
            };
            let panoptic = fuse(&semantic, &heat, &pair(offset), &pair(orient), &cfg.fusion)?;
            let s = cfg.model.scene_classes;
            let scene = argmax(scene.data()[n * s..(n + 1) * s].iter().copied());
            out.push(Prediction {
                semantic,
                panoptic,
                scene,
            });
        }
    }
    Ok(out)
}

pub fn truth_panoptic(s: &SceneSample) -> PanopticMap {
    PanopticMap {
        category: s.semantic.clone(),
        instance: s.instance.clone(),
        orientations: BTreeMap::new(),
    }
}

pub fn class_sets(cfg: &Config) -> ClassSets {
    ClassSets {
        num_classes: cfg.model.semantic.num_classes,
        things: cfg.model.thing_classes(),
        void_id: cfg.losses.ignore_id,
    }
}

/// Full inference, fusion and metrics over a dataset.
pub fn evaluate(cfg: &Config, params: &ParamStore<f32>, data: &Dataset) -> Result<MetricReport> {
    check_compatible(cfg, &data.manifest)?;
    if data.samples.is_empty() {
        return Err(invalid("evaluation needs at least one sample"));
    }
    with_threads(cfg.train.threads, || {
        let preds = predict(cfg, params, &data.samples)?;
        let mut acc = EvalAccumulator::new(class_sets(cfg), cfg.model.scene_classes)?;
        for (p, s) in preds.iter().zip(&data.samples) {
            let truth = truth_panoptic(s);
            acc.add(&ImageEval {
                semantic_pred: &p.semantic,
                semantic_truth: &s.semantic,
                panoptic_pred: &p.panoptic,
                panoptic_truth: &truth,
                orientations_truth: &s.orientations,
                scene_pred: p.scene,
                scene_truth: s.scene_class,
            })?;
        }
        acc.report()
    })?
}
