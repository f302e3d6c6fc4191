//! Flat run configuration: one `key = value` per line (TOML syntax). Every
//! key is also a command-line flag of the same name; flags override the
//! file, the file overrides `MCLE_PRECISION`, which overrides defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mcle_core::data::DatasetFormat;
use mcle_core::{Precision, RunConfig};
use serde::Deserialize;

macro_rules! flat_config {
    ($( $(#[$meta:meta])* $field:ident : $ty:ty ),* $(,)?) => {
        #[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct FlatConfig {
            $( $(#[$meta])* #[arg(long)] pub $field: Option<$ty>, )*
        }

        impl FlatConfig {
            /// Field-wise `self` unless unset, then `base`.
            pub fn or(self, base: FlatConfig) -> FlatConfig {
                FlatConfig { $( $field: self.$field.or(base.$field), )* }
            }
        }
    };
}

flat_config! {
    d: usize,
    n_layers: usize,
    n_heads: usize,
    ffn_mult: usize,
    max_positions: usize,
    pos_scale: f64,
    /// Image slots per sample (external feature files).
    m: usize,
    /// Raw feature width (external feature files).
    d_raw: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    tau_init: f64,
    k_sem: usize,
    k_img: usize,
    k_ins: usize,
    batch_size: usize,
    epochs: usize,
    max_text_len: usize,
    seed: u64,
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    no_cot: bool,
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    no_semantic: bool,
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    no_image: bool,
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    no_instance: bool,
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    no_all: bool,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip_norm: f64,
    /// constant | cosine
    schedule: String,
    /// f32 | f64
    precision: String,
    /// per_token | sum
    vqa_normalization: String,
    mining_refresh: usize,
    min_freq: usize,
    train: PathBuf,
    eval: PathBuf,
    feature_dir: PathBuf,
    out_dir: PathBuf,
    /// synthetic_json | vqax_json | aokvqa_json
    format: String,
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_owned()))
        .with_context(|| format!("invalid {key} {value:?}"))
}

impl FlatConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn apply(&self, c: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $( if let Some(v) = self.$src.clone() { $dst = v; } )*
            };
        }
        set! {
            d => c.model.d,
            n_layers => c.model.n_layers,
            n_heads => c.model.n_heads,
            ffn_mult => c.model.ffn_mult,
            max_positions => c.model.max_positions,
            pos_scale => c.model.pos_scale,
            m => c.model.m,
            d_raw => c.model.d_raw,
            alpha => c.weights.alpha,
            beta => c.weights.beta,
            gamma => c.weights.gamma,
            tau_init => c.tau_init,
            k_sem => c.top_k.sem,
            k_img => c.top_k.img,
            k_ins => c.top_k.ins,
            batch_size => c.batch_size,
            epochs => c.epochs,
            max_text_len => c.max_text_len,
            seed => c.seed,
            no_cot => c.ablations.no_cot,
            no_semantic => c.ablations.no_semantic,
            no_image => c.ablations.no_image,
            no_instance => c.ablations.no_instance,
            no_all => c.ablations.no_all,
            lr => c.optimizer.lr,
            beta1 => c.optimizer.beta1,
            beta2 => c.optimizer.beta2,
            eps => c.optimizer.eps,
            weight_decay => c.optimizer.weight_decay,
            clip_norm => c.optimizer.clip_norm,
            mining_refresh => c.mining_refresh,
            min_freq => c.min_freq,
        }
        if let Some(v) = &self.schedule {
            c.optimizer.schedule = parse_enum("schedule", v)?;
        }
        if let Some(v) = &self.precision {
            c.precision = v.parse()?;
        }
        if let Some(v) = &self.vqa_normalization {
            c.vqa_normalization = parse_enum("vqa_normalization", v)?;
        }
        if let Some(p) = &self.train {
            c.paths.train = Some(p.clone());
        }
        if let Some(p) = &self.eval {
            c.paths.eval = Some(p.clone());
        }
        if let Some(p) = &self.feature_dir {
            c.paths.feature_dir = Some(p.clone());
        }
        if let Some(p) = &self.out_dir {
            c.paths.out_dir = Some(p.clone());
        }
        Ok(())
    }

    pub fn dataset_format(&self) -> Result<DatasetFormat> {
        Ok(self.format.as_deref().unwrap_or("synthetic_json").parse()?)
    }
}

/// Defaults, then `MCLE_PRECISION`, then the file, then the flags.
pub fn resolve(file: Option<&Path>, flags: FlatConfig) -> Result<(RunConfig, FlatConfig)> {
    let from_file = match file {
        Some(p) => FlatConfig::from_file(p)?,
        None => FlatConfig::default(),
    };
    let merged = flags.or(from_file);
    let mut cfg = RunConfig::default();
    if let Some(p) = Precision::from_env() {
        cfg.precision = p;
    }
    merged.apply(&mut cfg)?;
    cfg.validate()?;
    if cfg.paths.train.is_none() {
        bail!("no training data: set `train` in the config or pass --train");
    }
    Ok((cfg, merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcle_core::train::LrSchedule;

    #[test]
    fn file_values_are_typed() {
        let f = FlatConfig::from_toml(
            "d = 16\nlr = 0.001\nno_all = true\nschedule = \"cosine\"\nprecision = \"f64\"\ntrain = \"a.jsonl\"\n",
        )
        .unwrap();
        let mut c = RunConfig::default();
        f.apply(&mut c).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.optimizer.lr, 0.001);
        assert!(c.ablations.no_all);
        assert_eq!(c.optimizer.schedule, LrSchedule::Cosine);
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(c.paths.train, Some(PathBuf::from("a.jsonl")));
        assert_eq!(c.epochs, 30);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(FlatConfig::from_toml("learning_rate = 0.1").is_err());
        assert!(FlatConfig::from_toml("d = \"big\"").is_err());
        let f = FlatConfig::from_toml("schedule = \"linear\"").unwrap();
        assert!(f.apply(&mut RunConfig::default()).is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = FlatConfig::from_toml("epochs = 5\nseed = 1").unwrap();
        let flags = FlatConfig {
            seed: Some(9),
            ..FlatConfig::default()
        };
        let m = flags.or(file);
        assert_eq!((m.epochs, m.seed), (Some(5), Some(9)));
    }
}
