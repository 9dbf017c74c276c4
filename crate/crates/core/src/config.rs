//! Run configuration: flat `key=value` text, validated before any work and
//! echoed verbatim into the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::fusion::VffmConfig;
use crate::losses::ENET_K;
use crate::network::{BackboneConfig, BackboneVariant, FusionMode, Modality, NetworkConfig, LEVELS};
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeighting {
    /// `1 / ln(k + p_c)` from the training histogram.
    Enet,
    /// Plain cross-entropy.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub resize: Option<(usize, usize)>,
    pub include_flipped: bool,
    pub backbone: BackboneVariant,
    pub channels: Option<[usize; LEVELS]>,
    /// 0 takes the class count from the dataset.
    pub classes: usize,
    pub kernel: usize,
    pub squeeze_ratio: usize,
    pub latent_dim: usize,
    pub fusion: FusionMode,
    pub beta: f64,
    pub prior_category: bool,
    pub prior_illumination: bool,
    pub illuminations: usize,
    pub skip0_after_final_upsample: bool,
    pub samples: usize,
    pub optimizer: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub class_weighting: ClassWeighting,
    pub enet_k: f64,
    pub augment: bool,
    pub crop_fraction: f64,
    pub seed: u64,
    pub missing_modality: Option<Modality>,
    pub exclude_background: bool,
    pub eval_split: Split,
    /// Use only the first n training ids (0 = all).
    pub max_train: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            resize: None,
            include_flipped: false,
            backbone: BackboneVariant::Tiny,
            channels: None,
            classes: 0,
            kernel: 7,
            squeeze_ratio: 16,
            latent_dim: 8,
            fusion: FusionMode::Probabilistic,
            beta: 0.5,
            prior_category: true,
            prior_illumination: true,
            illuminations: 2,
            skip0_after_final_upsample: false,
            samples: 1,
            optimizer: "adamw".into(),
            lr: 5e-5,
            weight_decay: 5e-4,
            epochs: 300,
            batch_size: 3,
            class_weighting: ClassWeighting::Enet,
            enet_k: ENET_K,
            augment: true,
            crop_fraction: 0.9,
            seed: 0,
            missing_modality: None,
            exclude_background: false,
            eval_split: Split::Test,
            max_train: 0,
        }
    }
}

/// Every config key, in echo order.
pub const KEYS: &[&str] = &[
    "data_root",
    "resize",
    "include_flipped",
    "backbone",
    "channels",
    "classes",
    "kernel",
    "squeeze_ratio",
    "latent_dim",
    "fusion",
    "beta",
    "prior_category",
    "prior_illumination",
    "illuminations",
    "skip0_after_final_upsample",
    "samples",
    "optimizer",
    "lr",
    "weight_decay",
    "epochs",
    "batch_size",
    "class_weighting",
    "enet_k",
    "augment",
    "crop_fraction",
    "seed",
    "missing_modality",
    "exclude_background",
    "eval_split",
    "max_train",
];

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "resize" => {
                self.resize = match value {
                    "none" | "" => None,
                    v => {
                        let (h, w) = v.split_once('x').ok_or_else(|| bad(key, v))?;
                        Some((num(key, h)?, num(key, w)?))
                    }
                }
            }
            "include_flipped" => self.include_flipped = boolean(key, value)?,
            "backbone" => self.backbone = BackboneVariant::parse(value)?,
            "channels" => {
                self.channels = match value {
                    "default" | "" => None,
                    v => {
                        let c: Vec<usize> = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
                        Some(c.try_into().map_err(|_| bad(key, v))?)
                    }
                }
            }
            "classes" => self.classes = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "squeeze_ratio" => self.squeeze_ratio = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "fusion" => self.fusion = FusionMode::parse(value)?,
            "beta" => self.beta = num(key, value)?,
            "prior_category" => self.prior_category = boolean(key, value)?,
            "prior_illumination" => self.prior_illumination = boolean(key, value)?,
            "illuminations" => self.illuminations = num(key, value)?,
            "skip0_after_final_upsample" => self.skip0_after_final_upsample = boolean(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "optimizer" => self.optimizer = value.to_string(),
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "class_weighting" => {
                self.class_weighting = match value {
                    "enet" => ClassWeighting::Enet,
                    "uniform" => ClassWeighting::Uniform,
                    v => return Err(bad(key, v)),
                }
            }
            "enet_k" => self.enet_k = num(key, value)?,
            "augment" => self.augment = boolean(key, value)?,
            "crop_fraction" => self.crop_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "missing_modality" => {
                self.missing_modality = match value {
                    "none" => None,
                    "rgb" => Some(Modality::Rgb),
                    "thermal" => Some(Modality::Thermal),
                    v => return Err(bad(key, v)),
                }
            }
            "exclude_background" => self.exclude_background = boolean(key, value)?,
            "eval_split" => self.eval_split = Split::parse(value)?,
            "max_train" => self.max_train = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "data_root" => self.data_root.display().to_string(),
            "resize" => self.resize.map_or("none".into(), |(h, w)| format!("{h}x{w}")),
            "include_flipped" => self.include_flipped.to_string(),
            "backbone" => self.backbone.name().into(),
            "channels" => self.channels.map_or("default".into(), |c| {
                c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            }),
            "classes" => self.classes.to_string(),
            "kernel" => self.kernel.to_string(),
            "squeeze_ratio" => self.squeeze_ratio.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "fusion" => self.fusion.name().into(),
            "beta" => self.beta.to_string(),
            "prior_category" => self.prior_category.to_string(),
            "prior_illumination" => self.prior_illumination.to_string(),
            "illuminations" => self.illuminations.to_string(),
            "skip0_after_final_upsample" => self.skip0_after_final_upsample.to_string(),
            "samples" => self.samples.to_string(),
            "optimizer" => self.optimizer.clone(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "class_weighting" => match self.class_weighting {
                ClassWeighting::Enet => "enet".into(),
                ClassWeighting::Uniform => "uniform".into(),
            },
            "enet_k" => self.enet_k.to_string(),
            "augment" => self.augment.to_string(),
            "crop_fraction" => self.crop_fraction.to_string(),
            "seed" => self.seed.to_string(),
            "missing_modality" => match self.missing_modality {
                None => "none".into(),
                Some(Modality::Rgb) => "rgb".into(),
                Some(Modality::Thermal) => "thermal".into(),
            },
            "exclude_background" => self.exclude_background.to_string(),
            "eval_split" => self.eval_split.name().into(),
            "max_train" => self.max_train.to_string(),
            other => panic!("unknown config key {other}"),
        }
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.squeeze_ratio == 0 || self.latent_dim == 0 {
            return fail("squeeze_ratio and latent_dim must be positive".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.samples == 0 {
            return fail("samples must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("lr must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.illuminations == 0 {
            return fail("illuminations must be at least 1".into());
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return fail(format!("crop_fraction must be in (0, 1], got {}", self.crop_fraction));
        }
        if self.enet_k <= 1.0 {
            return fail(format!("enet_k must exceed 1, got {}", self.enet_k));
        }
        if self.optimizer != "adamw" {
            return fail(format!("unknown optimizer {:?}", self.optimizer));
        }
        if let Some((h, w)) = self.resize {
            if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
                return fail(format!("resize {h}x{w} must be a positive multiple of 32"));
            }
        }
        self.backbone_config()?;
        if self.classes == 1 || self.classes > 256 {
            return fail(format!("classes must be in 2..=256 (or 0 for the dataset count), got {}", self.classes));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let base = match self.backbone {
            BackboneVariant::Tiny => BackboneConfig::tiny(),
            BackboneVariant::Resnet50Shaped => BackboneConfig::resnet50_shaped(),
        };
        BackboneConfig::new(self.backbone, self.channels.unwrap_or(base.channels))
    }

    pub fn network_config(&self, classes: usize) -> Result<NetworkConfig> {
        let mut n = NetworkConfig::new(self.backbone_config()?, classes);
        n.fusion = VffmConfig { kernel: self.kernel, squeeze_ratio: self.squeeze_ratio, latent_dim: self.latent_dim };
        n.fusion_mode = self.fusion;
        n.prior_category = self.prior_category;
        n.prior_illumination = self.prior_illumination;
        n.illuminations = self.illuminations;
        n.skip0_after_final_upsample = self.skip0_after_final_upsample;
        Ok(n)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("channels", "4,4,8,8,16").unwrap();
        cfg.set("resize", "64x96").unwrap();
        cfg.set("missing_modality", "thermal").unwrap();
        cfg.set("beta", "0.3").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.kernel, cfg.squeeze_ratio, cfg.latent_dim, cfg.batch_size), (7, 16, 8, 3));
        assert_eq!((cfg.lr, cfg.weight_decay, cfg.beta), (5e-5, 5e-4, 0.5));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_text("nonsense=1").is_err());
        assert!(RunConfig::from_text("beta=abc").is_err());
        assert!(RunConfig::from_text("beta=-1").unwrap().validate().is_err());
        assert!(RunConfig::from_text("kernel=4").unwrap().validate().is_err());
        assert!(RunConfig::from_text("samples=0").unwrap().validate().is_err());
        assert!(RunConfig::from_text("just a line").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::from_text("# sweep\n\nseed = 4  # trailing\n").unwrap();
        assert_eq!(cfg.seed, 4);
    }
}
