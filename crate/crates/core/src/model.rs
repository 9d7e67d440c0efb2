//! Full network: encoder, semantic and instance decoders, scene head.

use mtscene_tensor::{Real, Var};

use crate::encoder::{self, EncoderConfig};
use crate::error::{invalid, Result};
use crate::instance::{self, InstanceConfig, InstanceOutputs};
use crate::losses::{declare_scene_head, scene_head};
use crate::params::{Ctx, Init, ParamStore};
use crate::semantic::{self, cfil, declare_cfil, CfilPosition, SemanticConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub semantic: SemanticConfig,
    pub instance: InstanceConfig,
    pub cfil_position: CfilPosition,
    /// Leading semantic classes that are stuff; the rest are things.
    pub stuff_classes: usize,
    pub scene_classes: usize,
    pub norm: NormConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            semantic: SemanticConfig::default(),
            instance: InstanceConfig::default(),
            cfil_position: CfilPosition::Semantic,
            stuff_classes: 2,
            scene_classes: 4,
            norm: NormConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.semantic.validate()?;
        self.instance.validate()?;
        if self.stuff_classes == 0 || self.stuff_classes >= self.semantic.num_classes {
            return Err(invalid("need at least one stuff and one thing class"));
        }
        if self.scene_classes < 2 {
            return Err(invalid("scene.num_classes must be at least 2"));
        }
        if self.semantic.nfcl_layers.iter().any(|&s| !(1..=4).contains(&s)) {
            return Err(invalid("semantic.nfcl_layers entries must be stages 1..4"));
        }
        let p = self.cfil_position;
        let odd = |c: usize| c % 2 != 0;
        if (p.in_semantic() && odd(self.semantic.embed_dim))
            || (p.in_encoder() && odd(self.encoder.widths[3]))
            || (p.in_instance() && odd(self.instance.widths[0]))
        {
            return Err(invalid("CFIL needs an even channel count where it is placed"));
        }
        if !(self.norm.epsilon > 0.0) || !(0.0..=1.0).contains(&self.norm.momentum) {
            return Err(invalid("norm.epsilon must be positive and norm.momentum in [0, 1]"));
        }
        Ok(())
    }

    pub fn thing_classes(&self) -> Vec<u32> {
        (self.stuff_classes as u32..self.semantic.num_classes as u32).collect()
    }
}

/// Declares every parameter and buffer of the network.
pub fn declare<T: Real>(init: &mut Init<T>, cfg: &ModelConfig) -> Result<()> {
    let w = cfg.encoder.widths;
    encoder::declare(init, &cfg.encoder)?;
    if cfg.cfil_position.in_encoder() {
        declare_cfil(init, "encoder.cfil", w[3], cfg.semantic.cfil_kernel)?;
    }
    semantic::declare(init, &cfg.semantic, &w, cfg.cfil_position.in_semantic())?;
    instance::declare(init, &cfg.instance, &w, cfg.cfil_position.in_instance())?;
    declare_scene_head(init, w[3], cfg.scene_classes)
}

pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    declare(&mut Init::new(&mut store, seed), cfg)?;
    Ok(store)
}

#[derive(Clone, Debug)]
pub struct Outputs {
    /// `N x K x H x W` at input resolution.
    pub semantic: Var,
    pub instance: InstanceOutputs,
    /// `N x S`.
    pub scene: Var,
}

/// Runs the network on an `N x 4 x H x W` RGB-D batch.
pub fn forward<T: Real>(ctx: &mut Ctx<T>, cfg: &ModelConfig, rgbd: Var) -> Result<Outputs> {
    let (_, _, h, w) = ctx.g.value(rgbd).dims4()?;
    let mut feats = encoder::encode(ctx, &cfg.encoder, rgbd)?;
    if cfg.cfil_position.in_encoder() {
        feats.feats[3] = cfil(ctx, "encoder.cfil", feats.feats[3])?;
        ctx.record("encoder.cfil", feats.feats[3]);
    }
    let semantic = semantic::decode(ctx, &cfg.semantic, &feats, cfg.cfil_position.in_semantic(), h, w)?;
    let instance = instance::decode(ctx, &cfg.instance, &feats, cfg.cfil_position.in_instance())?;
    let scene = scene_head(ctx, feats.feats[3])?;
    ctx.record("scene.logits", scene);
    Ok(Outputs {
        semantic,
        instance,
        scene,
    })
}
