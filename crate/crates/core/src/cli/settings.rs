//! The flat run configuration: defaults, strict `key = value` files and the
//! resolved echo written next to every output.

use std::fmt;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::model::{ModelConfig, StackConfig};
use crate::numerics::LAYER_NORM_EPS;
use crate::patching::MaskingStrategy;
use crate::training::{AdamWConfig, RunConfig, Schedule};

/// Comma-separated values.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|item| item.trim().parse::<T>().map_err(|_| format!("bad list item `{}`", item.trim())))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

macro_rules! settings {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        /// Every configurable value of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Settings {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for Settings {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl Settings {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Parses `value` into the field named `key`.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value
                            .parse::<$ty>()
                            .map_err(|_| format!("invalid value `{value}` for `{key}`"))?;
                        Ok(())
                    })*
                    _ => Err(format!("unknown config key `{key}`")),
                }
            }

            fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string())),*]
            }
        }
    };
}

settings! {
    seed: u64 = 0;
    manifest: String = String::new();
    out: String = "out".into();
    /// Input checkpoint for `finetune` (empty: train from scratch) and `eval`.
    checkpoint: String = String::new();

    image_size: usize = 224;
    patch_size: usize = 16;
    classes: usize = 4;
    encoder_layers: usize = 12;
    encoder_dim: usize = 768;
    encoder_heads: usize = 12;
    encoder_mlp_dim: usize = 3072;
    decoder_layers: usize = 8;
    decoder_dim: usize = 512;
    decoder_heads: usize = 16;
    decoder_mlp_dim: usize = 2048;

    mask_strategy: MaskingStrategy = MaskingStrategy::RegionGuided;
    mask_ratio: f64 = 0.75;
    overlap_threshold: f64 = 0.0;

    pretrain_epochs: usize = 40;
    finetune_epochs: usize = 30;
    batch_size: usize = 256;
    base_lr: f64 = 1.5e-4;
    weight_decay: f64 = 0.05;
    beta1: f64 = 0.9;
    beta2: f64 = 0.95;
    adam_eps: f64 = 1e-8;
    schedule: Schedule = Schedule::Constant;
    warmup_epochs: usize = 0;
    label_fraction: f64 = 1.0;
    freeze_encoder: bool = false;
    /// Write wall-clock seconds into metrics CSVs, which makes them
    /// differ between otherwise identical runs.
    wall_clock: bool = false;

    sweep_ratios: List<f64> = List(vec![0.15, 0.30, 0.45, 0.60, 0.75, 0.90]);
    sweep_strategies: List<MaskingStrategy> = List(vec![MaskingStrategy::RegionGuided, MaskingStrategy::Random]);

    /// Manifest row rendered by `mask-viz`.
    viz_index: usize = 0;

    synth_size: usize = 32;
    synth_per_class: usize = 100;
    synth_classes: usize = 4;
    synth_frequency: f64 = 4.0;
    synth_amplitude: f64 = 0.15;
    synth_noise: f64 = 0.05;
    synth_phase_jitter: f64 = 0.0;
    synth_background: f64 = 0.5;
    synth_background_noise: f64 = 0.05;
}

impl Settings {
    /// Applies a config file's lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown and repeated keys are errors.
    pub fn apply_file(&mut self, text: &str, source: &str) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| format!("{source}:{}: {msg}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) && Self::KEYS.contains(&key) {
                return Err(at(format!("config key `{key}` is set twice")));
            }
            self.set(key, value.trim()).map_err(at)?;
        }
        Ok(())
    }

    /// One `key = value` line per setting, loadable with [`Settings::apply_file`].
    pub fn render(&self) -> String {
        self.render_except(&[])
    }

    /// [`Settings::render`] without the listed keys.
    pub fn render_except(&self, skip: &[&str]) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            if !skip.contains(&k) {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        let tokens = if self.patch_size == 0 { 0 } else { (self.image_size / self.patch_size).pow(2) };
        ModelConfig {
            patch_size: self.patch_size,
            channels: 1,
            max_tokens: tokens,
            classes: self.classes,
            encoder: StackConfig {
                layers: self.encoder_layers,
                dim: self.encoder_dim,
                heads: self.encoder_heads,
                mlp_dim: self.encoder_mlp_dim,
            },
            decoder: StackConfig {
                layers: self.decoder_layers,
                dim: self.decoder_dim,
                heads: self.decoder_heads,
                mlp_dim: self.decoder_mlp_dim,
            },
            norm_eps: LAYER_NORM_EPS,
        }
    }

    fn run_config(&self, epochs: usize) -> RunConfig {
        RunConfig {
            epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            sigma: self.mask_ratio,
            strategy: self.mask_strategy,
            overlap_threshold: self.overlap_threshold,
            seed: self.seed,
            schedule: self.schedule,
            warmup_epochs: self.warmup_epochs,
            label_fraction: self.label_fraction,
            freeze_encoder: self.freeze_encoder,
        }
    }

    pub fn pretrain_run(&self) -> RunConfig {
        self.run_config(self.pretrain_epochs)
    }

    /// Fine-tuning shares the optimizer settings of pretraining.
    pub fn finetune_run(&self) -> RunConfig {
        self.run_config(self.finetune_epochs)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::new(self.synth_size, self.synth_per_class, self.synth_classes, self.seed);
        for t in &mut spec.textures {
            t.frequency = self.synth_frequency;
            t.amplitude = self.synth_amplitude;
            t.noise = self.synth_noise;
        }
        spec.phase_jitter = self.synth_phase_jitter;
        spec.background_level = self.synth_background;
        spec.background_noise = self.synth_background_noise;
        spec
    }

    /// Checks that do not need any input files.
    pub fn validate(&self) -> Result<(), String> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        self.model_config().validate().map_err(|e| e.to_string())?;
        self.pretrain_run().validate().map_err(|e| e.to_string())?;
        self.finetune_run().validate().map_err(|e| e.to_string())?;
        if self.synth_classes == 0 || self.synth_per_class == 0 {
            return Err("synth_classes and synth_per_class must be positive".into());
        }
        if let Some(r) = self.sweep_ratios.0.iter().find(|&&r| !(r > 0.0 && r < 1.0)) {
            return Err(format!("sweep ratio {r} must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}
