//! Named parameter storage and the forward-pass context that binds it to a
//! graph.

use std::collections::BTreeMap;

use mtscene_tensor::{BnParams, ConvParams, Graph, Real, RunningStats, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::NormConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics: saved in checkpoints, never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, (ParamKind, Tensor<T>)>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, t: Tensor<T>) {
        self.entries.insert(name.into(), (kind, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|(k, _)| *k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|(n, (k, t))| (n.as_str(), *k, t))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, k, _)| *k == ParamKind::Trainable)
            .map(|(n, _, _)| n.to_string())
            .collect()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, k, _)| *k == ParamKind::Trainable && n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, (k, t))| (n.clone(), (*k, t.cast())))
                .collect(),
        }
    }

    /// Writes refreshed batch-norm statistics back into the buffers.
    pub fn apply_running_stats(&mut self, updates: Vec<(String, RunningStats<T>)>) -> Result<()> {
        for (name, stats) in updates {
            for (suffix, values) in [("running_mean", stats.mean), ("running_var", stats.var)] {
                let key = format!("{name}.{suffix}");
                let t = self.get_mut(&key).ok_or_else(|| Error::MissingParam(key.clone()))?;
                t.data_mut().copy_from_slice(&values);
            }
        }
        Ok(())
    }
}

/// Seeded parameter initializer.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
        let bound = (3.0 / fan_in as f64).sqrt();
        Ok(Tensor::uniform(shape, bound, &mut self.rng)?)
    }

    pub fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, kh: usize, kw: usize, bias: bool) -> Result<()> {
        let w = self.uniform(&[out_ch, in_ch, kh, kw], in_ch * kh * kw)?;
        self.store.insert(format!("{name}.weight"), ParamKind::Trainable, w);
        if bias {
            self.store
                .insert(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out_ch])?);
        }
        Ok(())
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<()> {
        let c = [channels];
        self.store.insert(format!("{name}.gamma"), ParamKind::Trainable, Tensor::ones(&c)?);
        self.store.insert(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&c)?);
        self.store.insert(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&c)?);
        self.store.insert(format!("{name}.running_var"), ParamKind::Buffer, Tensor::ones(&c)?);
        Ok(())
    }

    pub fn linear(&mut self, name: &str, out_f: usize, in_f: usize) -> Result<()> {
        let w = self.uniform(&[out_f, in_f], in_f)?;
        self.store.insert(format!("{name}.weight"), ParamKind::Trainable, w);
        self.store
            .insert(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out_f])?);
        Ok(())
    }
}

/// Forward-pass context: binds stored parameters to graph variables on first
/// use and collects batch-norm statistic updates.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    pub training: bool,
    norm: NormConfig,
    updates: Vec<(String, RunningStats<T>)>,
    trace: Option<BTreeMap<String, Var>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, training: bool, norm: NormConfig) -> Self {
        Self {
            g,
            store,
            bound: BTreeMap::new(),
            training,
            norm,
            updates: Vec::new(),
            trace: None,
        }
    }

    /// Uses `var` for parameter `name` instead of the stored tensor.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    /// Records named intermediate activations for later inspection.
    pub fn enable_trace(&mut self) {
        self.trace = Some(BTreeMap::new());
    }

    pub fn record(&mut self, name: &str, v: Var) {
        if let Some(t) = &mut self.trace {
            t.insert(name.to_string(), v);
        }
    }

    pub fn trace(&self) -> Option<&BTreeMap<String, Var>> {
        self.trace.as_ref()
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn take_updates(&mut self) -> Vec<(String, RunningStats<T>)> {
        std::mem::take(&mut self.updates)
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.store.get(name).is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let v = self.g.param(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, padding: (usize, usize)) -> Result<Var> {
        let weight = self.param(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let bias = if self.has(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        let p = ConvParams {
            weight,
            bias,
            stride: (stride, stride),
            padding,
        };
        Ok(self.g.conv2d(x, &p)?)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let store = self.store;
        let rm = store.require(&format!("{name}.running_mean"))?;
        let rv = store.require(&format!("{name}.running_var"))?;
        let p = BnParams {
            gamma,
            beta,
            running_mean: rm.data(),
            running_var: rv.data(),
            epsilon: T::lit(self.norm.epsilon),
            momentum: T::lit(self.norm.momentum),
        };
        let (y, stats) = self.g.batch_norm(x, &p, self.training)?;
        if let Some(s) = stats {
            self.updates.push((name.to_string(), s));
        }
        Ok(y)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        Ok(self.g.linear(x, w, Some(b))?)
    }
}
