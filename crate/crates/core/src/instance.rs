//! Three-layer instance decoder of non-bottleneck-1D blocks with center,
//! offset and orientation heads at every layer.

use mtscene_tensor::{Real, Var};

use crate::encoder::{EncoderConfig, EncoderOutput};
use crate::error::{invalid, Result};
use crate::params::{Ctx, Init};
use crate::semantic::{cfil, declare_cfil};

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceConfig {
    pub widths: [usize; 3],
    pub blocks_per_layer: usize,
    pub pyramid_supervision: bool,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            widths: [64, 32, 16],
            blocks_per_layer: 3,
            pyramid_supervision: true,
        }
    }
}

impl InstanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(invalid("instance decoder widths must be positive"));
        }
        Ok(())
    }

    /// Indices of decoder layers that carry heads.
    pub fn head_layers(&self) -> Vec<usize> {
        if self.pyramid_supervision {
            vec![0, 1, 2]
        } else {
            vec![2]
        }
    }

    /// Downsampling of decoder layer `l` (0-based) relative to the input.
    pub fn layer_factor(l: usize) -> usize {
        EncoderConfig::STRIDE >> (l + 1)
    }
}

/// Head outputs at one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutputs {
    /// Downsampling relative to the input.
    pub factor: usize,
    /// `N x 1 x h x w`, after sigmoid.
    pub center: Var,
    /// `N x 2 x h x w`, (row, col) displacement in level pixels.
    pub offset: Var,
    /// `N x 2 x h x w` raw (cos, sin).
    pub orientation: Var,
}

/// Levels ordered coarse to fine; the last is the final prediction.
#[derive(Clone, Debug)]
pub struct InstanceOutputs {
    pub levels: Vec<LevelOutputs>,
}

/// Ratio of factorized to full parameters for a `k x k` conv: `2 / k`.
pub fn param_savings(c: usize, k: usize, f: usize) -> Result<f64> {
    if c == 0 || k == 0 || f == 0 {
        return Err(invalid("param_savings needs positive C, k and F"));
    }
    Ok((2 * c * k * f) as f64 / (c * k * k * f) as f64)
}

/// Weights of the factorized NB1D convs and of the full `k x k` convs they
/// stand for, counted from `(name, shape)` pairs such as checkpoint entries.
pub fn nb1d_weight_counts<'a>(shapes: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> (u64, u64) {
    let (mut factorized, mut full) = (0u64, 0u64);
    for (name, shape) in shapes {
        let Some(rest) = name.strip_prefix("instance.") else { continue };
        if !rest.contains(".nb") || !name.ends_with(".weight") || shape.len() != 4 {
            continue;
        }
        let conv = name.rsplit('.').nth(1).unwrap_or("");
        if !matches!(conv, "conv0" | "conv1" | "conv2" | "conv3") {
            continue;
        }
        factorized += shape.iter().product::<usize>() as u64;
        // the k x 1 conv of each pair stands in for one full k x k conv
        if shape[3] == 1 {
            let k = shape[2] as u64;
            full += (shape[0] * shape[1]) as u64 * k * k;
        }
    }
    (factorized, full)
}

pub fn declare_nb1d<T: Real>(init: &mut Init<T>, name: &str, c: usize) -> Result<()> {
    for (i, (kh, kw)) in [(3, 1), (1, 3), (3, 1), (1, 3)].into_iter().enumerate() {
        init.conv(&format!("{name}.conv{i}"), c, c, kh, kw, false)?;
    }
    init.batch_norm(&format!("{name}.bn0"), c)?;
    init.batch_norm(&format!("{name}.bn1"), c)
}

/// Two factorized 3x3 convolutions (3x1, ReLU, 1x3, BN) with ReLU between
/// them, a residual add and a final ReLU.
pub fn non_bottleneck_1d<T: Real>(ctx: &mut Ctx<T>, name: &str, x: Var) -> Result<Var> {
    let mut y = x;
    for pair in 0..2 {
        if pair == 1 {
            y = ctx.g.relu(y)?;
        }
        y = ctx.conv(&format!("{name}.conv{}", 2 * pair), y, 1, (1, 0))?;
        y = ctx.g.relu(y)?;
        y = ctx.conv(&format!("{name}.conv{}", 2 * pair + 1), y, 1, (0, 1))?;
        y = ctx.batch_norm(&format!("{name}.bn{pair}"), y)?;
    }
    let s = ctx.g.add(x, y)?;
    Ok(ctx.g.relu(s)?)
}

pub fn declare<T: Real>(init: &mut Init<T>, cfg: &InstanceConfig, enc_widths: &[usize; 4], with_cfil: bool) -> Result<()> {
    let mut c_in = enc_widths[3];
    for (l, &w) in cfg.widths.iter().enumerate() {
        let name = format!("instance.layer{l}");
        init.conv(&format!("{name}.conv"), w, c_in, 3, 3, false)?;
        init.batch_norm(&format!("{name}.bn"), w)?;
        for b in 0..cfg.blocks_per_layer {
            declare_nb1d(init, &format!("{name}.nb{b}"), w)?;
        }
        init.conv(&format!("{name}.skip"), w, enc_widths[2 - l], 1, 1, false)?;
        if l == 0 && with_cfil {
            declare_cfil(init, "instance.cfil", w, 3)?;
        }
        if cfg.head_layers().contains(&l) {
            init.conv(&format!("{name}.center"), 1, w, 1, 1, true)?;
            init.conv(&format!("{name}.offset"), 2, w, 1, 1, true)?;
            init.conv(&format!("{name}.orientation"), 2, w, 1, 1, true)?;
        }
        c_in = w;
    }
    Ok(())
}

pub fn decode<T: Real>(ctx: &mut Ctx<T>, cfg: &InstanceConfig, feats: &EncoderOutput, with_cfil: bool) -> Result<InstanceOutputs> {
    let heads = cfg.head_layers();
    let mut x = feats.feats[3];
    let mut levels = Vec::new();
    for l in 0..3 {
        let name = format!("instance.layer{l}");
        x = ctx.conv(&format!("{name}.conv"), x, 1, (1, 1))?;
        x = ctx.batch_norm(&format!("{name}.bn"), x)?;
        x = ctx.g.relu(x)?;
        for b in 0..cfg.blocks_per_layer {
            x = non_bottleneck_1d(ctx, &format!("{name}.nb{b}"), x)?;
        }
        let (_, _, h, w) = ctx.g.value(x).dims4()?;
        x = ctx.g.upsample_bilinear(x, 2 * h, 2 * w)?;
        let skip = ctx.conv(&format!("{name}.skip"), feats.feats[2 - l], 1, (0, 0))?;
        if ctx.g.shape(skip) != ctx.g.shape(x) {
            return Err(invalid(format!(
                "instance layer {l}: skip {:?} does not match decoder feature {:?}",
                ctx.g.shape(skip),
                ctx.g.shape(x)
            )));
        }
        x = ctx.g.add(x, skip)?;
        if l == 0 && with_cfil {
            x = cfil(ctx, "instance.cfil", x)?;
        }
        ctx.record(&name, x);
        if heads.contains(&l) {
            let c = ctx.conv(&format!("{name}.center"), x, 1, (0, 0))?;
            let center = ctx.g.sigmoid(c)?;
            let offset = ctx.conv(&format!("{name}.offset"), x, 1, (0, 0))?;
            let orientation = ctx.conv(&format!("{name}.orientation"), x, 1, (0, 0))?;
            levels.push(LevelOutputs {
                factor: InstanceConfig::layer_factor(l),
                center,
                offset,
                orientation,
            });
        }
    }
    Ok(InstanceOutputs { levels })
}
