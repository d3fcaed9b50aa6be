//! Flat textual run configuration.
//!
//! One `key = value` per line, `#` comments, no nesting. Every key has a
//! default, unknown keys are rejected, and serialization emits keys in a
//! fixed order so configs diff cleanly. The `CGTRACK_SEED` environment
//! variable (read by the CLI) overrides `seed` without touching the file.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::objective::LossWeights;
use crate::synth::SynthConfig;
use crate::track::TrackConfig;
use crate::train::TrainConfig;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub eg_ratio: usize,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub jitter: f64,
    pub search_factor: f64,
    pub template_factor: f64,
    pub window_weight: f64,
    pub synth_width: usize,
    pub synth_height: usize,
    pub target_min: usize,
    pub target_max: usize,
    pub velocity_x: f64,
    pub velocity_y: f64,
    pub scale_amplitude: f64,
    pub occluder: bool,
    pub frames: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let track = TrackConfig::default();
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        let weights = LossWeights::default();
        RunConfig {
            variant: Variant::T,
            eg_ratio: ModelConfig::variant(Variant::T).eg_ratio,
            lambda_giou: weights.lambda_giou,
            lambda_l1: weights.lambda_l1,
            steps: train.steps,
            lr: train.lr,
            weight_decay: train.weight_decay,
            batch: 8,
            jitter: 0.1,
            search_factor: track.search_factor,
            template_factor: track.template_factor,
            window_weight: track.window_weight,
            synth_width: synth.width,
            synth_height: synth.height,
            target_min: synth.target_min,
            target_max: synth.target_max,
            velocity_x: synth.velocity.0,
            velocity_y: synth.velocity.1,
            scale_amplitude: synth.scale_amplitude,
            occluder: synth.occluder,
            frames: 20,
            seed: synth.seed,
        }
    }
}

macro_rules! keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl RunConfig {
            fn apply(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => { self.$field = parse_value!($kind, key, value)?; Ok(()) })+
                    _ => Err(Error::Input(format!("unknown config key '{}'", key))),
                }
            }

            /// Serializes every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, format_value!($kind, self.$field)));)+
                out
            }
        }
    };
}

macro_rules! parse_value {
    (usize, $key:expr, $v:expr) => {
        $v.parse::<usize>().map_err(|_| bad_value($key, $v))
    };
    (u64, $key:expr, $v:expr) => {
        $v.parse::<u64>().map_err(|_| bad_value($key, $v))
    };
    (f64, $key:expr, $v:expr) => {
        $v.parse::<f64>().map_err(|_| bad_value($key, $v))
    };
    (bool, $key:expr, $v:expr) => {
        $v.parse::<bool>().map_err(|_| bad_value($key, $v))
    };
    (variant, $key:expr, $v:expr) => {
        $v.parse::<Variant>()
    };
}

macro_rules! format_value {
    (variant, $v:expr) => {
        $v.to_string()
    };
    ($kind:ident, $v:expr) => {
        $v.to_string()
    };
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Input(format!("config key '{}' has unparsable value '{}'", key, value))
}

keys! {
    "model.variant" => variant: variant,
    "head.eg_ratio" => eg_ratio: usize,
    "loss.lambda_giou" => lambda_giou: f64,
    "loss.lambda_l1" => lambda_l1: f64,
    "train.steps" => steps: usize,
    "train.lr" => lr: f64,
    "train.weight_decay" => weight_decay: f64,
    "train.batch" => batch: usize,
    "train.jitter" => jitter: f64,
    "track.search_factor" => search_factor: f64,
    "track.template_factor" => template_factor: f64,
    "track.window_weight" => window_weight: f64,
    "synth.width" => synth_width: usize,
    "synth.height" => synth_height: usize,
    "synth.target_min" => target_min: usize,
    "synth.target_max" => target_max: usize,
    "synth.velocity_x" => velocity_x: f64,
    "synth.velocity_y" => velocity_y: f64,
    "synth.scale_amplitude" => scale_amplitude: f64,
    "synth.occluder" => occluder: bool,
    "synth.frames" => frames: usize,
    "seed" => seed: u64,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Input(format!("config line {} is not 'key = value': '{}'", lineno + 1, raw))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a seed override (the CLI passes the `CGTRACK_SEED` variable).
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Input(format!("seed override '{}' is not a u64", v)))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::variant(self.variant);
        cfg.eg_ratio = self.eg_ratio;
        cfg
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            width: self.synth_width,
            height: self.synth_height,
            target_min: self.target_min,
            target_max: self.target_max,
            velocity: (self.velocity_x, self.velocity_y),
            scale_amplitude: self.scale_amplitude,
            occluder: self.occluder,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            weight_decay: self.weight_decay,
            loss_weights: LossWeights { lambda_giou: self.lambda_giou, lambda_l1: self.lambda_l1 },
        }
    }

    pub fn track_config(&self) -> TrackConfig {
        TrackConfig {
            search_factor: self.search_factor,
            template_factor: self.template_factor,
            window_weight: self.window_weight,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn parse_applies_overrides_and_comments() {
        let text = "\
# tracking run
model.variant = B
train.lr = 0.002   # bumped for the overfit run

track.window_weight = 0.5
seed = 99
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.variant, Variant::B);
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(cfg.window_weight, 0.5);
        assert_eq!(cfg.seed, 99);
        // Untouched keys keep defaults.
        assert_eq!(cfg.steps, RunConfig::default().steps);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("model.variance = B\n").is_err());
        assert!(RunConfig::parse("train.steps = many\n").is_err());
        assert!(RunConfig::parse("just some words\n").is_err());
    }

    #[test]
    fn seed_override_wins() {
        let mut cfg = RunConfig::parse("seed = 5\n").unwrap();
        cfg.apply_seed_override(Some("1234")).unwrap();
        assert_eq!(cfg.seed, 1234);
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seed, 1234);
        assert!(cfg.apply_seed_override(Some("not-a-seed")).is_err());
    }

    #[test]
    fn derived_configs_carry_the_values() {
        let cfg = RunConfig::parse("model.variant = S\nhead.eg_ratio = 3\nsynth.occluder = true\n")
            .unwrap();
        assert_eq!(cfg.model_config().eg_ratio, 3);
        assert!(cfg.synth_config().occluder);
        assert_eq!(cfg.track_config().search_factor, 4.0);
    }
}
