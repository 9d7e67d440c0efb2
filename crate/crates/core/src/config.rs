//! Flat `key = value` configuration covering every module.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{io_err, Error, Result};
use crate::fusion::FusionConfig;
use crate::instance::InstanceConfig;
use crate::losses::LossConfig;
use crate::model::{ModelConfig, NormConfig};
use crate::scheduler::{SchedulerConfig, SchedulerMode, StreamSpec};
use crate::semantic::{CfilPosition, SemanticConfig};
use crate::synth::GenConfig;
use crate::train::TrainConfig;

struct KeyDef {
    key: &'static str,
    default: &'static str,
    help: &'static str,
}

macro_rules! keys {
    ($($key:literal = $default:literal : $help:literal;)*) => {
        &[$(KeyDef { key: $key, default: $default, help: $help }),*]
    };
}

const KEYS: &[KeyDef] = keys! {
    "encoder.widths" = "16,32,64,128" : "channel width of each of the four stages";
    "encoder.depths" = "1,1,2,1" : "fusion blocks per stage";
    "encoder.split_ratio" = "0.25" : "fraction of channels convolved by the partial conv";
    "encoder.expansion" = "2" : "pointwise expansion ratio inside a fusion block";
    "semantic.embed_dim" = "64" : "projection width of the MLP decoder";
    "semantic.num_classes" = "6" : "semantic classes (stuff first, then things)";
    "semantic.stuff_classes" = "2" : "number of leading stuff classes; the rest are things";
    "semantic.nfcl_layers" = "1,2,3" : "encoder stages guarded by NFCL, or `none`";
    "semantic.cfil_position" = "semantic" : "none | encoder | instance | both-decoders | encoder+semantic | semantic";
    "semantic.cfil_kernel" = "3" : "kernel size of the CFIL output conv";
    "instance.width" = "64,32,16" : "channel width of the three instance decoder layers";
    "instance.blocks_per_layer" = "3" : "non-bottleneck-1D blocks per decoder layer";
    "instance.pyramid_supervision" = "true" : "supervise every decoder layer, not only the last";
    "scene.num_classes" = "4" : "scene classes";
    "norm.epsilon" = "1e-5" : "batch-norm epsilon";
    "norm.momentum" = "0.1" : "batch-norm running-stat momentum";
    "losses.kappa" = "1.0" : "concentration of the orientation loss";
    "losses.center_sigma" = "8.0" : "Gaussian sigma of center heatmaps, full-resolution pixels";
    "losses.ignore_id" = "255" : "semantic label excluded from losses and metrics";
    "scheduler.mode" = "adaptive" : "fixed | adaptive";
    "scheduler.alpha" = "0.01" : "adjustment exponent";
    "scheduler.w_min" = "0.1" : "weight floor";
    "scheduler.window" = "1000" : "relative-loss history length";
    "scheduler.base_weights" = "1,1,1,1,1" : "base weights for se, ce, of, or, sc";
    "fusion.center_threshold" = "0.1" : "minimum center score";
    "fusion.nms_kernel" = "3" : "max-filter window for center peaks (odd)";
    "fusion.top_k" = "200" : "maximum centers per image";
    "fusion.min_area" = "0" : "instances with fewer pixels are dropped to void";
    "gen.height" = "64" : "generated image height";
    "gen.width" = "64" : "generated image width";
    "gen.min_objects" = "1" : "minimum instances per scene";
    "gen.max_objects" = "4" : "maximum instances per scene";
    "gen.min_size" = "10" : "minimum object extent in pixels";
    "gen.max_size" = "22" : "maximum object extent in pixels";
    "gen.min_area_fraction" = "0.0025" : "minimum visible instance area as a fraction of the image";
    "gen.depth_noise" = "0" : "standard deviation of additive depth noise (0 disables)";
    "train.lr" = "0.03" : "SGD learning rate";
    "train.momentum" = "0.9" : "SGD momentum";
    "train.weight_decay" = "1e-4" : "L2 weight decay";
    "train.batch_size" = "8" : "samples per batch";
    "train.iterations" = "500" : "optimizer steps";
    "train.seed" = "0" : "seed for parameter init and batch order";
    "train.cosine" = "false" : "cosine learning-rate decay";
    "train.threads" = "0" : "worker threads (0 = all cores, 1 = single-threaded)";
    "bench.epochs" = "200" : "epochs of the scheduler benchmark";
    "bench.batches_per_epoch" = "50" : "batches per benchmark epoch";
    "bench.lr" = "0.05" : "step size of the benchmark loss dynamics";
    "bench.noise" = "1.0" : "gradient-noise multiplier of the benchmark";
    "gradcheck.seeds" = "20" : "random seeds per check";
    "gradcheck.tolerance" = "1e-5" : "maximum relative error";
    "gradcheck.size" = "64" : "input height and width for sub-network checks";
    "gradcheck.coords" = "2" : "sampled coordinates per parameter tensor in sub-network checks";
};

/// Help text listing every accepted key with its default.
pub fn help_text() -> String {
    let width = KEYS.iter().map(|k| k.key.len() + k.default.len() + 3).max().unwrap_or(0);
    let mut s = String::from("Config keys (key = default):\n");
    for k in KEYS {
        let lhs = format!("{} = {}", k.key, k.default);
        let _ = writeln!(s, "  {lhs:<width$}  {}", k.help);
    }
    s
}

/// Raw key/value table after defaults and overrides are merged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| (k.key.to_string(), k.default.to_string()))
                .collect(),
        }
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            raw.set(k.trim(), v.trim())?;
        }
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    /// Canonical text form: every key, sorted.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v == "none" || v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{p}`")))
            })
            .collect()
    }

    fn array<T: FromStr + Copy + Default, const N: usize>(&self, key: &str) -> Result<[T; N]> {
        let v: Vec<T> = self.list(key)?;
        v.try_into()
            .map_err(|v: Vec<T>| Error::Config(format!("`{key}`: expected {N} values, got {}", v.len())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub seeds: u64,
    pub tolerance: f64,
    pub size: usize,
    pub coords: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub scheduler: SchedulerConfig,
    pub fusion: FusionConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub bench: StreamSpec,
    pub gradcheck: GradCheckSettings,
    raw: RawConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::from_raw(RawConfig::default()).expect("defaults are valid")
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(RawConfig::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Default config with the given overrides applied.
    pub fn with(pairs: &[(&str, &str)]) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (k, v) in pairs {
            raw.set(k, v)?;
        }
        Self::from_raw(raw)
    }

    pub fn raw(&self) -> &RawConfig {
        &self.raw
    }

    pub fn to_text(&self) -> String {
        self.raw.to_text()
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let r = &raw;
        let cfil_position: CfilPosition = r.parse_value("semantic.cfil_position")?;
        let encoder = EncoderConfig {
            widths: r.array("encoder.widths")?,
            depths: r.array("encoder.depths")?,
            split_ratio: r.parse_value("encoder.split_ratio")?,
            expansion: r.parse_value("encoder.expansion")?,
        };
        let semantic = SemanticConfig {
            embed_dim: r.parse_value("semantic.embed_dim")?,
            num_classes: r.parse_value("semantic.num_classes")?,
            nfcl_layers: r.list("semantic.nfcl_layers")?,
            cfil_kernel: r.parse_value("semantic.cfil_kernel")?,
        };
        let instance = InstanceConfig {
            widths: r.array("instance.width")?,
            blocks_per_layer: r.parse_value("instance.blocks_per_layer")?,
            pyramid_supervision: r.bool("instance.pyramid_supervision")?,
        };
        let model = ModelConfig {
            encoder,
            semantic,
            instance,
            cfil_position,
            stuff_classes: r.parse_value("semantic.stuff_classes")?,
            scene_classes: r.parse_value("scene.num_classes")?,
            norm: NormConfig {
                epsilon: r.parse_value("norm.epsilon")?,
                momentum: r.parse_value("norm.momentum")?,
            },
        };
        model.validate()?;

        let losses = LossConfig {
            kappa: r.parse_value("losses.kappa")?,
            center_sigma: r.parse_value("losses.center_sigma")?,
            ignore_id: r.parse_value("losses.ignore_id")?,
        };
        losses.validate()?;
        if (losses.ignore_id as usize) < model.semantic.num_classes {
            return Err(Error::Config("`losses.ignore_id` collides with a semantic class".into()));
        }

        let mode: SchedulerMode = r.parse_value("scheduler.mode")?;
        let scheduler = SchedulerConfig {
            mode,
            alpha: r.parse_value("scheduler.alpha")?,
            w_min: r.parse_value("scheduler.w_min")?,
            window: r.parse_value("scheduler.window")?,
            base_weights: r.array("scheduler.base_weights")?,
        };
        scheduler.validate()?;

        let fusion = FusionConfig {
            center_threshold: r.parse_value("fusion.center_threshold")?,
            nms_kernel: r.parse_value("fusion.nms_kernel")?,
            top_k: r.parse_value("fusion.top_k")?,
            min_area: r.parse_value("fusion.min_area")?,
            thing_classes: model.thing_classes(),
            void_id: losses.ignore_id,
        };
        fusion.validate()?;

        let gen = GenConfig {
            height: r.parse_value("gen.height")?,
            width: r.parse_value("gen.width")?,
            stuff_classes: model.stuff_classes,
            thing_classes: model.semantic.num_classes - model.stuff_classes,
            scene_classes: model.scene_classes,
            min_objects: r.parse_value("gen.min_objects")?,
            max_objects: r.parse_value("gen.max_objects")?,
            min_size: r.parse_value("gen.min_size")?,
            max_size: r.parse_value("gen.max_size")?,
            min_area_fraction: r.parse_value("gen.min_area_fraction")?,
            depth_noise: r.parse_value("gen.depth_noise")?,
        };
        gen.validate()?;

        let train = TrainConfig {
            lr: r.parse_value("train.lr")?,
            momentum: r.parse_value("train.momentum")?,
            weight_decay: r.parse_value("train.weight_decay")?,
            batch_size: r.parse_value("train.batch_size")?,
            iterations: r.parse_value("train.iterations")?,
            seed: r.parse_value("train.seed")?,
            cosine: r.bool("train.cosine")?,
            threads: r.parse_value("train.threads")?,
        };
        train.validate()?;

        let bench = StreamSpec::benchmark(
            r.parse_value("bench.epochs")?,
            r.parse_value("bench.batches_per_epoch")?,
            r.parse_value("bench.lr")?,
            r.parse_value("bench.noise")?,
        );
        bench.validate()?;

        let gradcheck = GradCheckSettings {
            seeds: r.parse_value("gradcheck.seeds")?,
            tolerance: r.parse_value("gradcheck.tolerance")?,
            size: r.parse_value("gradcheck.size")?,
            coords: r.parse_value("gradcheck.coords")?,
        };
        if gradcheck.seeds == 0 || gradcheck.size % 32 != 0 || gradcheck.size == 0 {
            return Err(Error::Config(
                "gradcheck needs at least one seed and a size divisible by 32".into(),
            ));
        }

        Ok(Self {
            model,
            losses,
            scheduler,
            fusion,
            gen,
            train,
            bench,
            gradcheck,
            raw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_round_trip() {
        let c = Config::default();
        assert_eq!(c.model.encoder.widths, [16, 32, 64, 128]);
        assert_eq!(c.model.semantic.nfcl_layers, vec![1, 2, 3]);
        let again = Config::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("encoder.widths = 8,8,8,8\nfoo.bar = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo.bar"), "{err}");
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c = Config::parse("# toy\n\nsemantic.nfcl_layers = none\nscheduler.mode = fixed\n").unwrap();
        assert!(c.model.semantic.nfcl_layers.is_empty());
        assert_eq!(c.scheduler.mode, SchedulerMode::Fixed);
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(Config::parse("encoder.widths\n").is_err());
        assert!(Config::parse("encoder.widths = 1,2\n").is_err());
        assert!(Config::parse("train.lr = fast\n").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let h = help_text();
        for k in KEYS {
            assert!(h.contains(&format!("{} = {}", k.key, k.default)), "{}", k.key);
        }
    }
}
