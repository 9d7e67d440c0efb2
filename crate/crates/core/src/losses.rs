//! The five task losses and the scene-classification head.

use mtscene_tensor::{Graph, Real, Var};

use crate::error::{invalid, Result};
use crate::params::{Ctx, Init};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kappa: f64,
    /// Full-resolution pixels.
    pub center_sigma: f64,
    pub ignore_id: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            center_sigma: 8.0,
            ignore_id: 255,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa <= 0.0 || self.center_sigma <= 0.0 {
            return Err(invalid("losses.kappa and losses.center_sigma must be positive"));
        }
        Ok(())
    }
}

/// Floor applied to the prediction norm before the orientation dot product.
pub const ORIENTATION_NORM_FLOOR: f64 = 1e-6;

/// Pixel-wise cross-entropy averaged over labels other than `ignore_id`.
/// `labels` holds one id per `(n, row, col)`.
pub fn semantic_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u32], ignore_id: u32) -> Result<Var> {
    let lab: Vec<Option<usize>> = labels
        .iter()
        .map(|&l| (l != ignore_id).then_some(l as usize))
        .collect();
    if lab.iter().all(Option::is_none) {
        return Err(invalid("semantic loss: every pixel is ignored"));
    }
    let lp = g.log_softmax(logits)?;
    Ok(g.nll(lp, &lab)?)
}

/// Mean squared error over every heatmap cell.
pub fn center_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(invalid(format!(
            "center loss: prediction {:?} vs target {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// Repeats an `N x h x w` mask over `channels` channels.
fn expand_mask<T: Real>(mask: &[bool], n: usize, channels: usize) -> Vec<T> {
    let plane = mask.len() / n;
    let mut out = Vec::with_capacity(mask.len() * channels);
    for s in mask.chunks(plane) {
        for _ in 0..channels {
            out.extend(s.iter().map(|&m| if m { T::one() } else { T::zero() }));
        }
    }
    out
}

/// Mean absolute error over valid cells and both channels. `mask` is
/// `N x h x w`.
pub fn offset_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(invalid("offset loss: prediction and target shapes differ"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(invalid("offset loss: empty mask"));
    }
    let n = g.shape(pred)[0];
    let m = expand_mask::<T>(mask, n, 2);
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    Ok(g.masked_mean(a, &m)?)
}

/// `1 - exp(kappa (f.t - 1))` for unit `t`, with `f` L2-normalized first.
pub fn orientation_loss(f: [f64; 2], t: [f64; 2], kappa: f64) -> Result<f64> {
    let norm = f[0].hypot(f[1]);
    if norm == 0.0 {
        return Err(invalid("orientation loss: zero-norm prediction"));
    }
    if kappa <= 0.0 {
        return Err(invalid("orientation loss: kappa must be positive"));
    }
    let dot = (f[0] * t[0] + f[1] * t[1]) / norm;
    Ok(1.0 - (kappa * (dot - 1.0)).exp())
}

/// Dense orientation loss averaged over masked pixels. `pred` and `target`
/// are `N x 2 x h x w`; `mask` is `N x h x w`.
pub fn orientation_loss_dense<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, mask: &[bool], kappa: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(invalid("orientation loss: prediction and target shapes differ"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(invalid("orientation loss: empty mask"));
    }
    let f = g.l2_normalize_channels(pred, T::lit(ORIENTATION_NORM_FLOOR))?;
    let ft = g.mul(f, target)?;
    let dot = g.sum_channels(ft)?;
    let z = g.add_scalar(dot, -T::one())?;
    let z = g.scale(z, T::lit(kappa))?;
    let e = g.exp(z)?;
    let e = g.scale(e, -T::one())?;
    let l = g.add_scalar(e, T::one())?;
    let m: Vec<T> = mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    Ok(g.masked_mean(l, &m)?)
}

/// Mean softmax cross-entropy of `N x S` logits.
pub fn scene_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u32]) -> Result<Var> {
    if labels.is_empty() {
        return Err(invalid("scene loss: empty batch"));
    }
    let lp = g.log_softmax(logits)?;
    let lab: Vec<Option<usize>> = labels.iter().map(|&l| Some(l as usize)).collect();
    Ok(g.nll(lp, &lab)?)
}

pub fn declare_scene_head<T: Real>(init: &mut Init<T>, in_ch: usize, classes: usize) -> Result<()> {
    init.linear("scene.fc", classes, in_ch)
}

/// Global average pool followed by a fully connected layer.
pub fn scene_head<T: Real>(ctx: &mut Ctx<T>, stage4: Var) -> Result<Var> {
    let p = ctx.g.global_avg_pool(stage4)?;
    ctx.linear("scene.fc", p)
}
