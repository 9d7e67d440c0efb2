//! Four-stage RGB-D fusion encoder built from merging layers and
//! partial-convolution fusion blocks.

use mtscene_tensor::{ConvParams, Graph, Real, Tensor, Var};

use crate::error::{invalid, Result};
use crate::params::{Ctx, Init};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub split_ratio: f64,
    pub expansion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            depths: [1, 1, 2, 1],
            split_ratio: 0.25,
            expansion: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio <= 1.0) {
            return Err(invalid("encoder.split_ratio must lie in (0, 1]"));
        }
        if self.expansion == 0 {
            return Err(invalid("encoder.expansion must be positive"));
        }
        for (s, &c) in self.widths.iter().enumerate() {
            let cp = partial_channels(c, self.split_ratio);
            if c == 0 || cp == 0 || (cp as f64 - self.split_ratio * c as f64).abs() > 1e-9 {
                return Err(invalid(format!(
                    "stage {} width {c} is not divisible by the partial-conv split {}",
                    s + 1,
                    self.split_ratio
                )));
            }
        }
        Ok(())
    }

    /// Total downsampling of the deepest stage.
    pub const STRIDE: usize = 32;

    /// Spatial reduction of stage `s` (1-based) relative to the input.
    pub fn stage_factor(s: usize) -> usize {
        4 << (s - 1)
    }
}

/// Channels convolved by a partial conv over `c` channels.
pub fn partial_channels(c: usize, split_ratio: f64) -> usize {
    (split_ratio * c as f64).round() as usize
}

/// Four feature maps at 1/4, 1/8, 1/16 and 1/32 of the input.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub feats: [Var; 4],
}

/// Extends an RGB kernel with a depth channel `D = (R + G + B) / 2`.
pub fn seed_depth_weights<T: Real>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let s = rgb.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(invalid(format!("expected an F x 3 x k x k kernel, got {s:?}")));
    }
    let (f, plane) = (s[0], s[2] * s[3]);
    let src = rgb.data();
    let mut out = Vec::with_capacity(f * 4 * plane);
    for o in 0..f {
        let base = o * 3 * plane;
        out.extend_from_slice(&src[base..base + 3 * plane]);
        for i in 0..plane {
            let sum = src[base + i] + src[base + plane + i] + src[base + 2 * plane + i];
            out.push(sum / T::lit(2.0));
        }
    }
    Ok(Tensor::new(&[f, 4, s[2], s[3]], out)?)
}

/// Convolves the leading `C' = round(split_ratio * C)` channels and passes
/// the rest through untouched.
pub fn partial_conv<T: Real>(g: &mut Graph<T>, x: Var, p: &ConvParams, split_ratio: f64) -> Result<Var> {
    let c = g.shape(x).get(1).copied().unwrap_or(0);
    let cp = partial_channels(c, split_ratio);
    if cp == 0 {
        return Err(invalid(format!("split {split_ratio} of {c} channels convolves nothing")));
    }
    let w = g.shape(p.weight);
    if w[0] != cp || w[1] != cp {
        return Err(invalid(format!("partial conv kernel {w:?} does not map {cp} -> {cp} channels")));
    }
    let head = g.slice_channels(x, 0, cp)?;
    let y = g.conv2d(head, p)?;
    if cp == c {
        return Ok(y);
    }
    let tail = g.slice_channels(x, cp, c)?;
    Ok(g.concat_channels(&[y, tail])?)
}

fn stage_name(s: usize) -> String {
    format!("encoder.stage{s}")
}

pub fn declare<T: Real>(init: &mut Init<T>, cfg: &EncoderConfig) -> Result<()> {
    let mut c_in = 4;
    for s in 1..=4 {
        let c = cfg.widths[s - 1];
        let k = if s == 1 { 4 } else { 2 };
        let name = stage_name(s);
        init.conv(&format!("{name}.merge"), c, c_in, k, k, false)?;
        init.batch_norm(&format!("{name}.merge_bn"), c)?;
        for b in 0..cfg.depths[s - 1] {
            declare_fusion_block(init, &format!("{name}.block{b}"), c, cfg)?;
        }
        c_in = c;
    }
    Ok(())
}

pub fn declare_fusion_block<T: Real>(init: &mut Init<T>, name: &str, c: usize, cfg: &EncoderConfig) -> Result<()> {
    let cp = partial_channels(c, cfg.split_ratio);
    let e = cfg.expansion * c;
    init.conv(&format!("{name}.pconv"), cp, cp, 3, 3, false)?;
    init.conv(&format!("{name}.pw1"), e, c, 1, 1, false)?;
    init.batch_norm(&format!("{name}.bn"), e)?;
    init.conv(&format!("{name}.pw2"), c, e, 1, 1, false)
}

/// `x + PW2(ReLU(BN(PW1(partial_conv(x)))))`.
pub fn fusion_block<T: Real>(ctx: &mut Ctx<T>, name: &str, x: Var, cfg: &EncoderConfig) -> Result<Var> {
    let p = ConvParams {
        weight: ctx.param(&format!("{name}.pconv.weight"))?,
        bias: None,
        stride: (1, 1),
        padding: (1, 1),
    };
    let y = partial_conv(ctx.g, x, &p, cfg.split_ratio)?;
    let y = ctx.conv(&format!("{name}.pw1"), y, 1, (0, 0))?;
    let y = ctx.batch_norm(&format!("{name}.bn"), y)?;
    let y = ctx.g.relu(y)?;
    let y = ctx.conv(&format!("{name}.pw2"), y, 1, (0, 0))?;
    Ok(ctx.g.add(x, y)?)
}

/// Strided conv + batch norm: 4x4 stride 4 at stage 1, 2x2 stride 2 after.
pub fn merging_layer<T: Real>(ctx: &mut Ctx<T>, stage: usize, x: Var) -> Result<Var> {
    let k = if stage == 1 { 4 } else { 2 };
    let shape = ctx.g.shape(x);
    if shape.len() != 4 || shape[2] % k != 0 || shape[3] % k != 0 {
        return Err(invalid(format!(
            "stage {stage} merging layer needs extents divisible by {k}, got {shape:?}"
        )));
    }
    let name = stage_name(stage);
    let y = ctx.conv(&format!("{name}.merge"), x, k, (0, 0))?;
    ctx.batch_norm(&format!("{name}.merge_bn"), y)
}

pub fn encode<T: Real>(ctx: &mut Ctx<T>, cfg: &EncoderConfig, rgbd: Var) -> Result<EncoderOutput> {
    let s = ctx.g.shape(rgbd).to_vec();
    if s.len() != 4 || s[1] != 4 {
        return Err(invalid(format!("encoder expects N x 4 x H x W input, got {s:?}")));
    }
    if s[2] % EncoderConfig::STRIDE != 0 || s[3] % EncoderConfig::STRIDE != 0 {
        return Err(invalid(format!(
            "input extents {}x{} are not divisible by {}",
            s[2],
            s[3],
            EncoderConfig::STRIDE
        )));
    }
    let mut x = rgbd;
    let mut feats = [rgbd; 4];
    for stage in 1..=4 {
        x = merging_layer(ctx, stage, x)?;
        for b in 0..cfg.depths[stage - 1] {
            x = fusion_block(ctx, &format!("{}.block{b}", stage_name(stage)), x, cfg)?;
        }
        ctx.record(&format!("encoder.stage{stage}"), x);
        feats[stage - 1] = x;
    }
    Ok(EncoderOutput { feats })
}

/// Multiply-accumulates of a `k x k` stride-1 conv over `c_in -> c_out`
/// channels on an `h x w` map.
pub fn conv_macs(h: usize, w: usize, k: usize, c_in: usize, c_out: usize) -> u64 {
    (h * w * k * k) as u64 * (c_in * c_out) as u64
}

/// `H * W * k^2 * C'^2`.
pub fn partial_conv_macs(h: usize, w: usize, k: usize, c: usize, split_ratio: f64) -> u64 {
    let cp = partial_channels(c, split_ratio);
    conv_macs(h, w, k, cp, cp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsRow {
    pub layer: String,
    pub kind: &'static str,
    pub out_h: usize,
    pub out_w: usize,
    pub macs: u64,
    /// MACs of a full 3x3 conv in place of the partial conv.
    pub full_equivalent: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Sum of partial-conv MACs and of their full-conv equivalents.
    pub fn partial_vs_full(&self) -> (u64, u64) {
        self.rows
            .iter()
            .filter_map(|r| r.full_equivalent.map(|f| (r.macs, f)))
            .fold((0, 0), |(a, b), (p, f)| (a + p, b + f))
    }
}

pub fn flops_report(cfg: &EncoderConfig, height: usize, width: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    if height % EncoderConfig::STRIDE != 0 || width % EncoderConfig::STRIDE != 0 {
        return Err(invalid(format!("input {height}x{width} is not divisible by 32")));
    }
    let mut rows = Vec::new();
    let mut c_in = 4;
    for s in 1..=4 {
        let f = EncoderConfig::stage_factor(s);
        let (h, w) = (height / f, width / f);
        let c = cfg.widths[s - 1];
        let k = if s == 1 { 4 } else { 2 };
        rows.push(FlopsRow {
            layer: format!("stage{s}.merge"),
            kind: "merge",
            out_h: h,
            out_w: w,
            macs: conv_macs(h, w, k, c_in, c),
            full_equivalent: None,
        });
        let e = cfg.expansion * c;
        for b in 0..cfg.depths[s - 1] {
            rows.push(FlopsRow {
                layer: format!("stage{s}.block{b}.pconv"),
                kind: "partial",
                out_h: h,
                out_w: w,
                macs: partial_conv_macs(h, w, 3, c, cfg.split_ratio),
                full_equivalent: Some(conv_macs(h, w, 3, c, c)),
            });
            for (name, ci, co) in [("pw1", c, e), ("pw2", e, c)] {
                rows.push(FlopsRow {
                    layer: format!("stage{s}.block{b}.{name}"),
                    kind: "pointwise",
                    out_h: h,
                    out_w: w,
                    macs: conv_macs(h, w, 1, ci, co),
                    full_equivalent: None,
                });
            }
        }
        c_in = c;
    }
    Ok(FlopsReport { rows })
}
