//! MLP semantic decoder with the normalized focus channel layer (NFCL) on
//! skip features and the context feature interaction layer (CFIL) on the
//! fused map.

use std::fmt;
use std::str::FromStr;

use mtscene_tensor::{Real, Var};

use crate::encoder::EncoderOutput;
use crate::error::{invalid, Error, Result};
use crate::params::{Ctx, Init};

/// Where CFIL is inserted (ablation positions).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfilPosition {
    None,
    Encoder,
    Instance,
    BothDecoders,
    EncoderSemantic,
    Semantic,
}

impl CfilPosition {
    pub const ALL: [CfilPosition; 6] = [
        CfilPosition::None,
        CfilPosition::Encoder,
        CfilPosition::Instance,
        CfilPosition::BothDecoders,
        CfilPosition::EncoderSemantic,
        CfilPosition::Semantic,
    ];

    pub fn in_encoder(self) -> bool {
        matches!(self, Self::Encoder | Self::EncoderSemantic)
    }

    pub fn in_semantic(self) -> bool {
        matches!(self, Self::Semantic | Self::BothDecoders | Self::EncoderSemantic)
    }

    pub fn in_instance(self) -> bool {
        matches!(self, Self::Instance | Self::BothDecoders)
    }

    fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Encoder => "encoder",
            Self::Instance => "instance",
            Self::BothDecoders => "both-decoders",
            Self::EncoderSemantic => "encoder+semantic",
            Self::Semantic => "semantic",
        }
    }
}

impl fmt::Display for CfilPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CfilPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown CFIL position `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    /// 1-based encoder stages guarded by NFCL.
    pub nfcl_layers: Vec<usize>,
    pub cfil_kernel: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_classes: 6,
            nfcl_layers: vec![1, 2, 3],
            cfil_kernel: 3,
        }
    }
}

impl SemanticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_classes < 2 {
            return Err(invalid("semantic decoder needs embed_dim > 0 and at least 2 classes"));
        }
        if let Some(l) = self.nfcl_layers.iter().find(|&&l| !(1..=4).contains(&l)) {
            return Err(invalid(format!("NFCL layer {l} does not name an encoder stage (1-4)")));
        }
        if self.cfil_kernel % 2 == 0 {
            return Err(invalid("semantic.cfil_kernel must be odd"));
        }
        Ok(())
    }
}

/// Channel weights `|gamma_i| / sum_j |gamma_j|`.
pub fn nfcl_weights(gamma: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = gamma.iter().map(|g| g.abs()).sum();
    if total <= 0.0 {
        return Err(invalid("NFCL channel weights undefined: every gamma is zero"));
    }
    Ok(gamma.iter().map(|g| g.abs() / total).collect())
}

pub fn declare_nfcl<T: Real>(init: &mut Init<T>, name: &str, c: usize) -> Result<()> {
    init.conv(&format!("{name}.conv"), c, c, 1, 1, false)?;
    init.batch_norm(&format!("{name}.bn"), c)
}

/// `sigmoid(W * BN(conv1x1(x))) * x` with `W` from the BN scale factors.
pub fn nfcl<T: Real>(ctx: &mut Ctx<T>, name: &str, x: Var) -> Result<Var> {
    let y = ctx.conv(&format!("{name}.conv"), x, 1, (0, 0))?;
    let y = ctx.batch_norm(&format!("{name}.bn"), y)?;
    let gamma = ctx.param(&format!("{name}.bn.gamma"))?;
    let w = ctx.g.abs_normalize(gamma)?;
    let t = ctx.g.channel_scale(y, w)?;
    let gate = ctx.g.sigmoid(t)?;
    Ok(ctx.g.mul(gate, x)?)
}

pub fn declare_cfil<T: Real>(init: &mut Init<T>, name: &str, c: usize, kernel: usize) -> Result<()> {
    if c % 2 != 0 {
        return Err(invalid(format!("CFIL needs an even channel count, got {c}")));
    }
    init.conv(&format!("{name}.branch1"), c / 2, c, 1, 1, true)?;
    init.conv(&format!("{name}.branch5"), c / 2, c, 1, 1, true)?;
    init.conv(&format!("{name}.out"), c, 2 * c, kernel, kernel, true)
}

/// Dual-scale context branch: 1x1 and 5x5 pooled summaries, compressed to
/// C/2 each, upsampled, concatenated with `x` and projected back to C.
pub fn cfil<T: Real>(ctx: &mut Ctx<T>, name: &str, x: Var) -> Result<Var> {
    let (_, c, h, w) = ctx.g.value(x).dims4()?;
    if c % 2 != 0 {
        return Err(invalid(format!("CFIL needs an even channel count, got {c}")));
    }
    if h < 5 || w < 5 {
        return Err(invalid(format!("CFIL needs a map of at least 5x5, got {h}x{w}")));
    }
    let mut parts = vec![x];
    for (branch, s) in [("branch1", 1), ("branch5", 5)] {
        let p = ctx.g.adaptive_avg_pool(x, s, s)?;
        ctx.record(&format!("{name}.pool{s}"), p);
        let b = ctx.conv(&format!("{name}.{branch}"), p, 1, (0, 0))?;
        parts.push(ctx.g.upsample_bilinear(b, h, w)?);
    }
    let cat = ctx.g.concat_channels(&parts)?;
    ctx.record(&format!("{name}.concat"), cat);
    let wv = ctx.param(&format!("{name}.out.weight"))?;
    let k = ctx.g.shape(wv)[2];
    ctx.conv(&format!("{name}.out"), cat, 1, (k / 2, k / 2))
}

pub fn declare<T: Real>(init: &mut Init<T>, cfg: &SemanticConfig, enc_widths: &[usize; 4], with_cfil: bool) -> Result<()> {
    let e = cfg.embed_dim;
    for (i, &c) in enc_widths.iter().enumerate() {
        let stage = i + 1;
        if cfg.nfcl_layers.contains(&stage) {
            declare_nfcl(init, &format!("semantic.nfcl{stage}"), c)?;
        }
        init.conv(&format!("semantic.proj{stage}"), e, c, 1, 1, true)?;
    }
    init.conv("semantic.fuse", e, 4 * e, 1, 1, false)?;
    init.batch_norm("semantic.fuse_bn", e)?;
    if with_cfil {
        declare_cfil(init, "semantic.cfil", e, cfg.cfil_kernel)?;
    }
    init.conv("semantic.classifier", cfg.num_classes, e, 1, 1, true)
}

/// Per-pixel class logits at `out_h x out_w`.
pub fn decode<T: Real>(
    ctx: &mut Ctx<T>,
    cfg: &SemanticConfig,
    feats: &EncoderOutput,
    with_cfil: bool,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let (_, _, h1, w1) = ctx.g.value(feats.feats[0]).dims4()?;
    let mut projected = Vec::with_capacity(4);
    for (i, &f) in feats.feats.iter().enumerate() {
        let stage = i + 1;
        let mut f = f;
        if cfg.nfcl_layers.contains(&stage) {
            f = nfcl(ctx, &format!("semantic.nfcl{stage}"), f)?;
            ctx.record(&format!("semantic.nfcl{stage}"), f);
        }
        let mut p = ctx.conv(&format!("semantic.proj{stage}"), f, 1, (0, 0))?;
        if stage > 1 {
            p = ctx.g.upsample_bilinear(p, h1, w1)?;
        }
        ctx.record(&format!("semantic.proj{stage}"), p);
        projected.push(p);
    }
    let cat = ctx.g.concat_channels(&projected)?;
    let x = ctx.conv("semantic.fuse", cat, 1, (0, 0))?;
    let x = ctx.batch_norm("semantic.fuse_bn", x)?;
    let mut x = ctx.g.relu(x)?;
    ctx.record("semantic.fused", x);
    if with_cfil {
        x = cfil(ctx, "semantic.cfil", x)?;
        ctx.record("semantic.cfil", x);
    }
    let logits = ctx.conv("semantic.classifier", x, 1, (0, 0))?;
    let logits = ctx.g.upsample_bilinear(logits, out_h, out_w)?;
    ctx.record("semantic.logits", logits);
    Ok(logits)
}
