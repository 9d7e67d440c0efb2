//! Multi-task adaptive loss weighting: relative losses, windowed history
//! averages and floored power-law weights, plus a synthetic loss-stream
//! benchmark comparing fixed and adaptive weighting.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use mtscene_tensor::{Graph, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

pub const NUM_TASKS: usize = 5;
pub const TASK_NAMES: [&str; NUM_TASKS] = ["se", "ce", "of", "or", "sc"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerMode {
    Fixed,
    Adaptive,
}

impl fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Adaptive => "adaptive",
        })
    }
}

impl FromStr for SchedulerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "adaptive" => Ok(Self::Adaptive),
            _ => Err(Error::Config(format!("unknown scheduler mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub mode: SchedulerMode,
    pub alpha: f64,
    pub w_min: f64,
    pub window: usize,
    pub base_weights: [f64; NUM_TASKS],
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode: SchedulerMode::Adaptive,
            alpha: 0.01,
            w_min: 0.1,
            window: 1000,
            base_weights: [1.0; NUM_TASKS],
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(invalid("scheduler.alpha must be positive"));
        }
        if self.w_min < 0.0 || self.window == 0 {
            return Err(invalid("scheduler.w_min must be nonnegative and scheduler.window positive"));
        }
        if self.base_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("scheduler.base_weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// `RL_k = L_k / sum_t L_t`.
pub fn relative_losses(losses: &[f64; NUM_TASKS]) -> Result<[f64; NUM_TASKS]> {
    if losses.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(invalid(format!("task losses must be finite and nonnegative: {losses:?}")));
    }
    let total: f64 = losses.iter().sum();
    if total <= 0.0 {
        return Err(invalid("relative losses undefined: total loss is zero"));
    }
    Ok(losses.map(|l| l / total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub config: SchedulerConfig,
    histories: [VecDeque<f64>; NUM_TASKS],
    weights: [f64; NUM_TASKS],
}

impl SchedulerState {
    /// Adaptive weights start at `max(Wbar_k, W_min)`, the value the update
    /// gives for an average relative loss of 1.
    pub fn new(config: SchedulerConfig) -> Self {
        let weights = match config.mode {
            SchedulerMode::Fixed => config.base_weights,
            SchedulerMode::Adaptive => config.base_weights.map(|b| adaptive_weight(b, 1.0, config.alpha, config.w_min)),
        };
        Self {
            config,
            histories: Default::default(),
            weights,
        }
    }

    pub fn weights(&self) -> [f64; NUM_TASKS] {
        self.weights
    }

    pub fn history(&self, task: usize) -> &VecDeque<f64> {
        &self.histories[task]
    }

    /// Mean of the retained relative losses of each task, once every
    /// history is nonempty.
    pub fn avg_relative_losses(&self) -> Option<[f64; NUM_TASKS]> {
        if self.histories.iter().any(VecDeque::is_empty) {
            return None;
        }
        Some(std::array::from_fn(|k| {
            let h = &self.histories[k];
            h.iter().sum::<f64>() / h.len() as f64
        }))
    }

    /// End-of-batch update; a no-op in fixed mode.
    pub fn observe(&mut self, losses: &[f64; NUM_TASKS]) -> Result<()> {
        if self.config.mode == SchedulerMode::Fixed {
            return Ok(());
        }
        let rl = relative_losses(losses)?;
        update_history(self, &rl);
        update_weights(self)
    }
}

/// Appends one relative-loss vector, evicting the oldest entries beyond the
/// window.
pub fn update_history(state: &mut SchedulerState, rl: &[f64; NUM_TASKS]) {
    let cap = state.config.window;
    for (h, &r) in state.histories.iter_mut().zip(rl) {
        h.push_back(r);
        while h.len() > cap {
            h.pop_front();
        }
    }
}

/// Recomputes every weight from the averaged relative losses.
pub fn update_weights(state: &mut SchedulerState) -> Result<()> {
    let avg = state
        .avg_relative_losses()
        .ok_or_else(|| invalid("scheduler weights need at least one recorded batch"))?;
    if let Some(k) = avg.iter().position(|&a| a <= 0.0) {
        return Err(invalid(format!(
            "average relative loss of task `{}` is not positive",
            TASK_NAMES[k]
        )));
    }
    let c = &state.config;
    state.weights = std::array::from_fn(|k| adaptive_weight(c.base_weights[k], avg[k], c.alpha, c.w_min));
    Ok(())
}

/// `max(base * avg_rl^alpha, w_min)`.
pub fn adaptive_weight(base: f64, avg_rl: f64, alpha: f64, w_min: f64) -> f64 {
    (base * avg_rl.powf(alpha)).max(w_min)
}

/// `sum_k W_k L_k`.
pub fn weighted_total(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(invalid(format!(
            "{} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

/// Weighted sum on the graph; weights enter as constants.
pub fn weighted_total_graph<T: Real>(g: &mut Graph<T>, losses: &[Var], weights: &[f64]) -> Result<Var> {
    if losses.len() != weights.len() || losses.is_empty() {
        return Err(invalid("weighted total needs one weight per loss"));
    }
    let mut total = g.scale(losses[0], T::lit(weights[0]))?;
    for (&l, &w) in losses.iter().zip(weights).skip(1) {
        let s = g.scale(l, T::lit(w))?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// One task of the synthetic loss-stream model: the loss is
/// `scale * x^2 + floor * exp(obs_noise * z - obs_noise^2 / 2)` and `x`
/// follows weighted noisy gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDynamics {
    pub scale: f64,
    pub floor: f64,
    pub init: f64,
    pub grad_noise: f64,
    pub obs_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub tasks: [TaskDynamics; NUM_TASKS],
}

impl StreamSpec {
    /// The bundled benchmark, with task scales loosely matching the loss
    /// magnitudes seen when training the network.
    pub fn benchmark(epochs: usize, batches_per_epoch: usize, lr: f64, noise: f64) -> Self {
        let t = |scale, floor, grad_noise| TaskDynamics {
            scale,
            floor,
            init: 1.0,
            grad_noise: grad_noise * noise,
            obs_noise: 0.3 * noise,
        };
        Self {
            epochs,
            batches_per_epoch,
            lr,
            tasks: [
                t(1.5, 0.10, 0.6),
                t(0.05, 0.005, 0.1),
                t(2.0, 0.30, 1.0),
                t(0.8, 0.05, 0.5),
                t(1.4, 0.02, 0.8),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(invalid("benchmark needs at least one epoch and one batch"));
        }
        if self.lr < 0.0 || self.tasks.iter().any(|t| t.scale < 0.0 || t.floor < 0.0) {
            return Err(invalid("benchmark rates and loss scales must be nonnegative"));
        }
        if self.tasks.iter().all(|t| t.scale * t.init * t.init + t.floor == 0.0) {
            return Err(invalid("benchmark losses are identically zero"));
        }
        Ok(())
    }
}

/// Per-epoch mean weighted total loss of one seeded run.
pub fn simulate_run(spec: &StreamSpec, sched: &SchedulerConfig, seed: u64) -> Result<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SchedulerState::new(sched.clone());
    let mut x: Vec<f64> = spec.tasks.iter().map(|t| t.init).collect();
    let mut trace = Vec::with_capacity(spec.epochs);
    let mut min_weight = f64::INFINITY;
    for _ in 0..spec.epochs {
        let mut epoch_total = 0.0;
        for _ in 0..spec.batches_per_epoch {
            let w = state.weights();
            min_weight = w.iter().copied().fold(min_weight, f64::min);
            let mut losses = [0.0; NUM_TASKS];
            for (k, t) in spec.tasks.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                losses[k] = t.scale * x[k] * x[k] + t.floor * (t.obs_noise * z - 0.5 * t.obs_noise * t.obs_noise).exp();
                let grad = 2.0 * t.scale * x[k] + t.grad_noise * e;
                x[k] -= spec.lr * w[k] * grad;
            }
            epoch_total += weighted_total(&losses, &w)?;
            state.observe(&losses)?;
        }
        trace.push(epoch_total / spec.batches_per_epoch as f64);
    }
    Ok((trace, min_weight))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: SchedulerMode,
    /// Cross-seed mean of the per-epoch total loss.
    pub trace: Vec<f64>,
    /// Cross-seed sample variance of the per-epoch total loss.
    pub variance: Vec<f64>,
    pub min_weight: f64,
}

impl ModeSummary {
    /// Mean variance over the final half of the epochs.
    pub fn late_variance(&self) -> f64 {
        let start = self.variance.len() / 2;
        let tail = &self.variance[start..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationReport {
    pub seeds: Vec<u64>,
    pub fixed: ModeSummary,
    pub adaptive: ModeSummary,
}

/// Runs fixed and adaptive weighting over identical seeded streams.
pub fn simulate_scheduler(spec: &StreamSpec, sched: &SchedulerConfig, seeds: &[u64]) -> Result<SimulationReport> {
    if seeds.is_empty() {
        return Err(invalid("scheduler benchmark needs at least one seed"));
    }
    spec.validate()?;
    let summarize = |mode: SchedulerMode| -> Result<ModeSummary> {
        let cfg = SchedulerConfig {
            mode,
            ..sched.clone()
        };
        let runs = seeds
            .iter()
            .map(|&s| simulate_run(spec, &cfg, s))
            .collect::<Result<Vec<_>>>()?;
        let n = runs.len() as f64;
        let mut trace = Vec::with_capacity(spec.epochs);
        let mut variance = Vec::with_capacity(spec.epochs);
        for e in 0..spec.epochs {
            let mean = runs.iter().map(|(t, _)| t[e]).sum::<f64>() / n;
            let var = if runs.len() > 1 {
                runs.iter().map(|(t, _)| (t[e] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            trace.push(mean);
            variance.push(var);
        }
        Ok(ModeSummary {
            mode,
            trace,
            variance,
            min_weight: runs.iter().map(|(_, w)| *w).fold(f64::INFINITY, f64::min),
        })
    };
    Ok(SimulationReport {
        seeds: seeds.to_vec(),
        fixed: summarize(SchedulerMode::Fixed)?,
        adaptive: summarize(SchedulerMode::Adaptive)?,
    })
}
