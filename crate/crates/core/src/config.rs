//! Flat `section.key = value` configuration files.
//!
//! Blank lines and text after `#` are ignored. Every key has a default, so a
//! file only lists what it changes. Environment variables named `BBS_` plus
//! the upper-cased key with dots replaced by underscores (`BBS_TRAIN_LR` for
//! `train.lr`) override file values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneKind, NUM_LEVELS};
use crate::decoder::DecoderKind;
use crate::dem::Gate;
use crate::metrics::EvalOptions;
use crate::model::{ModelConfig, Precision, VariantTag};
use crate::synth::DepthMode;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "BBS_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Training dataset root with `RGB/ depth/ GT/`; unused for synthetic data.
    pub root: Option<PathBuf>,
    pub name: String,
    pub invert_depth: bool,
    /// Generate the training corpus instead of reading `root`.
    pub synthetic: bool,
    pub synth_style: String,
    pub synth_count: usize,
    pub synth_seed: u64,
    pub synth_depth: DepthMode,
    pub synth_rgb_cue: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            name: "train".into(),
            invert_depth: false,
            synthetic: false,
            synth_style: "a".into(),
            synth_count: 8,
            synth_seed: 0,
            synth_depth: DepthMode::Informative,
            synth_rgb_cue: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalOptions,
}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "model.variant",
    "model.backbone",
    "model.toy_channels",
    "model.shared_weights",
    "model.use_dam",
    "model.channel_attention",
    "model.spatial_attention",
    "model.ptm",
    "model.decoder",
    "model.decoder_norm",
    "model.dem_ratio",
    "model.dem_kernel",
    "model.dem_gate",
    "model.precision",
    "model.seed",
    "backbone.weights",
    "train.lr",
    "train.lr_decay_factor",
    "train.lr_decay_every",
    "train.epochs",
    "train.batch",
    "train.clip",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.weight_decay",
    "train.side",
    "train.loss_alpha",
    "train.seed",
    "train.max_iters",
    "train.checkpoint_every",
    "train.augment",
    "train.flip",
    "train.rotation_deg",
    "train.crop_frac",
    "train.norm_mean",
    "train.norm_std",
    "data.root",
    "data.name",
    "data.invert_depth",
    "data.synthetic",
    "data.synth_style",
    "data.synth_count",
    "data.synth_seed",
    "data.synth_depth",
    "data.synth_rgb_cue",
    "eval.normalize",
    "eval.smeasure_alpha",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::ConfigValue {
        key: key.to_string(),
        reason: format!("`{value}`: {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::ConfigValue {
            key: key.into(),
            reason: format!("`{value}` is not a boolean"),
        }),
    }
}

fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let items = value
        .split(',')
        .map(|v| parse::<T>(key, v.trim()))
        .collect::<Result<Vec<_>>>()?;
    let n = items.len();
    items.try_into().map_err(|_| Error::ConfigValue {
        key: key.into(),
        reason: format!("expected {N} comma-separated values, got {n}"),
    })
}

fn parse_enum<T>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    options
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(value))
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::ConfigValue {
            key: key.into(),
            reason: format!(
                "`{value}` is not one of {}",
                options.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Sets one key. The variant key also resets the module flags it implies,
    /// so it should precede individual flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.variant" => *m = m.clone().with_variant(parse::<VariantTag>(key, v)?),
            "model.backbone" => {
                m.backbone.kind = parse_enum(key, v, &[("full", BackboneKind::Full), ("toy", BackboneKind::Toy)])?
            }
            "model.toy_channels" => m.backbone.toy_channels = parse_list::<usize, NUM_LEVELS>(key, v)?,
            "model.shared_weights" => m.backbone.shared_weights = parse_bool(key, v)?,
            "model.use_dam" => m.backbone.use_dam = parse_bool(key, v)?,
            "model.channel_attention" => m.dem.channel_attention = parse_bool(key, v)?,
            "model.spatial_attention" => m.dem.spatial_attention = parse_bool(key, v)?,
            "model.ptm" => m.ptm = parse_bool(key, v)?,
            "model.decoder" => {
                m.decoder = parse_enum(key, v, &[("cascaded", DecoderKind::Cascaded), ("sum", DecoderKind::Sum)])?
            }
            "model.decoder_norm" => m.decoder_norm = parse_bool(key, v)?,
            "model.dem_ratio" => m.dem.ratio = parse(key, v)?,
            "model.dem_kernel" => m.dem.spatial_kernel = parse(key, v)?,
            "model.dem_gate" => m.dem.gate = parse_enum(key, v, &[("sigmoid", Gate::Sigmoid), ("none", Gate::None)])?,
            "model.precision" => {
                m.precision = parse_enum(key, v, &[("f32", Precision::F32), ("f64", Precision::F64)])?
            }
            "model.seed" => m.seed = parse(key, v)?,
            "backbone.weights" => m.backbone.weights = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train.lr" => t.lr = parse(key, v)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "train.lr_decay_every" => t.lr_decay_every = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.clip" => t.clip = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.side" => t.side = parse(key, v)?,
            "train.loss_alpha" => {
                t.loss_alpha = parse(key, v)?;
                m.loss_alpha = t.loss_alpha;
            }
            "train.seed" => t.seed = parse(key, v)?,
            "train.max_iters" => {
                t.max_iters = if v.is_empty() || v.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.augment" => t.augment.enabled = parse_bool(key, v)?,
            "train.flip" => t.augment.flip = parse_bool(key, v)?,
            "train.rotation_deg" => t.augment.rotation_deg = parse(key, v)?,
            "train.crop_frac" => t.augment.crop_frac = parse(key, v)?,
            "train.norm_mean" => t.normalization.mean = parse_list::<f32, 3>(key, v)?,
            "train.norm_std" => t.normalization.std = parse_list::<f32, 3>(key, v)?,
            "data.root" => d.root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.name" => d.name = v.to_string(),
            "data.invert_depth" => d.invert_depth = parse_bool(key, v)?,
            "data.synthetic" => d.synthetic = parse_bool(key, v)?,
            "data.synth_style" => {
                d.synth_style = parse_enum(key, v, &[("a", "a"), ("b", "b")])?.to_string();
            }
            "data.synth_count" => d.synth_count = parse(key, v)?,
            "data.synth_seed" => d.synth_seed = parse(key, v)?,
            "data.synth_depth" => {
                d.synth_depth = parse_enum(
                    key,
                    v,
                    &[("informative", DepthMode::Informative), ("random", DepthMode::Random)],
                )?
            }
            "data.synth_rgb_cue" => d.synth_rgb_cue = parse_bool(key, v)?,
            "eval.normalize" => self.eval.normalize = parse_bool(key, v)?,
            "eval.smeasure_alpha" => self.eval.smeasure_alpha = parse(key, v)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Keys are applied in file
    /// order.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigValue {
                key: format!("line {}", no + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Environment variable that overrides `key`.
    pub fn env_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
    }

    /// Applies overrides from `vars`, e.g. `std::env::vars()`. Variables that
    /// carry the prefix but match no key are reported as unknown keys.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut found: Vec<(usize, String)> = Vec::new();
        for (name, value) in vars {
            if !name.starts_with(ENV_PREFIX) {
                continue;
            }
            match KEYS.iter().position(|k| Self::env_name(k) == name) {
                Some(i) => found.push((i, value)),
                None => return Err(Error::UnknownConfigKey(name)),
            }
        }
        // apply in key order so model.variant precedes the flags it resets
        found.sort_by_key(|(i, _)| *i);
        for (i, value) in found {
            self.set(KEYS[i], &value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Current value of every key in the file format.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let b = |x: bool| x.to_string();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<(&str, String)> = vec![
            ("model.variant", m.variant.to_string()),
            ("model.backbone", format!("{:?}", m.backbone.kind).to_lowercase()),
            ("model.toy_channels", join(&m.backbone.toy_channels)),
            ("model.shared_weights", b(m.backbone.shared_weights)),
            ("model.use_dam", b(m.backbone.use_dam)),
            ("model.channel_attention", b(m.dem.channel_attention)),
            ("model.spatial_attention", b(m.dem.spatial_attention)),
            ("model.ptm", b(m.ptm)),
            ("model.decoder", format!("{:?}", m.decoder).to_lowercase()),
            ("model.decoder_norm", b(m.decoder_norm)),
            ("model.dem_ratio", m.dem.ratio.to_string()),
            ("model.dem_kernel", m.dem.spatial_kernel.to_string()),
            ("model.dem_gate", format!("{:?}", m.dem.gate).to_lowercase()),
            ("model.precision", format!("{:?}", m.precision).to_lowercase()),
            ("model.seed", m.seed.to_string()),
            ("backbone.weights", path(&m.backbone.weights)),
            ("train.lr", t.lr.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.lr_decay_every", t.lr_decay_every.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.clip", t.clip.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.side", t.side.to_string()),
            ("train.loss_alpha", t.loss_alpha.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.max_iters", t.max_iters.map(|v| v.to_string()).unwrap_or_else(|| "none".into())),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.augment", b(t.augment.enabled)),
            ("train.flip", b(t.augment.flip)),
            ("train.rotation_deg", t.augment.rotation_deg.to_string()),
            ("train.crop_frac", t.augment.crop_frac.to_string()),
            ("train.norm_mean", join(&t.normalization.mean)),
            ("train.norm_std", join(&t.normalization.std)),
            ("data.root", path(&d.root)),
            ("data.name", d.name.clone()),
            ("data.invert_depth", b(d.invert_depth)),
            ("data.synthetic", b(d.synthetic)),
            ("data.synth_style", d.synth_style.clone()),
            ("data.synth_count", d.synth_count.to_string()),
            ("data.synth_seed", d.synth_seed.to_string()),
            ("data.synth_depth", format!("{:?}", d.synth_depth).to_lowercase()),
            ("data.synth_rgb_cue", b(d.synth_rgb_cue)),
            ("eval.normalize", b(self.eval.normalize)),
            ("eval.smeasure_alpha", self.eval.smeasure_alpha.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(Config::parse_str(&text).unwrap(), cfg);
    }

    #[test]
    fn comments_and_sections() {
        let cfg = Config::parse_str("# toy run\ntrain.lr = 0.001  # faster\n\nmodel.backbone = toy\n").unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.model.backbone.kind, BackboneKind::Toy);
    }

    #[test]
    fn unknown_key_is_named() {
        match Config::parse_str("train.lrr = 1") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "train.lrr"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn env_overrides() {
        let mut cfg = Config::default();
        cfg.apply_env([("BBS_TRAIN_LR".to_string(), "0.5".to_string()), ("HOME".into(), "/".into())])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(Config::env_name("train.lr_decay_every"), "BBS_TRAIN_LR_DECAY_EVERY");
        assert!(cfg.apply_env([("BBS_NOPE".to_string(), "1".to_string())]).is_err());
    }
}
