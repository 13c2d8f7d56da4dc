//! Flat TOML run configuration.
//!
//! Every [`ModelConfig`] field may appear as a top-level key, on top of the
//! preset named by `preset` (default `s3dis`). Training keys sit alongside:
//! `lr`, `weight_decay`, `steps`, `seed`, `grid_size`, `scene` and the
//! `augment_*` flags. Unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::training::{AugmentFlags, TrainConfig};

const TRAIN_KEYS: &[&str] = &[
    "preset",
    "lr",
    "weight_decay",
    "steps",
    "seed",
    "grid_size",
    "scene",
    "augment_rotate",
    "augment_scale",
    "augment_jitter",
    "augment_drop_color",
];

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainKeys {
    preset: Option<String>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    steps: Option<usize>,
    seed: Option<u64>,
    grid_size: Option<f64>,
    scene: Option<String>,
    augment_rotate: Option<bool>,
    augment_scale: Option<bool>,
    augment_jitter: Option<bool>,
    augment_drop_color: Option<bool>,
}

/// A fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Voxel size applied to input clouds; `0` disables grid sampling.
    pub grid_size: f64,
    /// Synthetic scene preset used by `train-toy`.
    pub scene: String,
}

/// Grid size paired with each model preset.
pub fn preset_grid_size(preset: &str) -> f64 {
    match preset {
        "scannet" => 0.02,
        _ => 0.04,
    }
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            preset: name.to_string(),
            model: ModelConfig::preset(name)?,
            train: TrainConfig::default(),
            grid_size: preset_grid_size(name),
            scene: "two_class".into(),
        })
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Config(format!("{}: {}", path.display(), message.trim_end()));
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let (train_part, model_part): (toml::Table, toml::Table) = table.into_iter().partition(|(k, _)| TRAIN_KEYS.contains(&k.as_str()));
        let keys: TrainKeys = toml::Value::Table(train_part)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;

        let preset = keys.preset.unwrap_or_else(|| "s3dis".into());
        let mut base = RunConfig::from_preset(&preset)?;
        let toml::Value::Table(mut merged) = toml::Value::try_from(&base.model).map_err(|e| Error::Config(e.to_string()))? else {
            unreachable!("a struct serialises to a table")
        };
        merged.extend(model_part);
        base.model = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;

        let t = &mut base.train;
        t.lr = keys.lr.unwrap_or(t.lr);
        t.weight_decay = keys.weight_decay.unwrap_or(t.weight_decay);
        t.steps = keys.steps.unwrap_or(t.steps);
        t.seed = keys.seed.unwrap_or(t.seed);
        let a = &mut t.augment;
        a.rotate = keys.augment_rotate.unwrap_or(a.rotate);
        a.scale = keys.augment_scale.unwrap_or(a.scale);
        a.jitter = keys.augment_jitter.unwrap_or(a.jitter);
        a.drop_color = keys.augment_drop_color.unwrap_or(a.drop_color);
        base.grid_size = keys.grid_size.unwrap_or(base.grid_size);
        if let Some(scene) = keys.scene {
            base.scene = scene;
        }
        base.validate()?;
        Ok(base)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.grid_size >= 0.0 && self.grid_size.is_finite()) {
            return Err(Error::Config(format!("grid_size must be a non-negative number, got {}", self.grid_size)));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a non-negative number, got {}", self.train.lr)));
        }
        if !(self.train.weight_decay >= 0.0 && self.train.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be a non-negative number".into()));
        }
        crate::training::SynthSpec::preset(&self.scene, 0)?;
        Ok(())
    }

    pub fn augment(&self) -> AugmentFlags {
        self.train.augment
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        RunConfig::parse(s, Path::new("test.toml"))
    }

    #[test]
    fn empty_document_is_s3dis() {
        let c = parse("").unwrap();
        assert_eq!(c.model, ModelConfig::s3dis());
        assert_eq!(c.model.s_win0, 0.16);
        assert_eq!(c.model.downsample_scale, 8);
        assert_eq!(c.model.base_channels, 48);
        assert_eq!(c.model.base_heads, 3);
        assert_eq!(c.model.depths, vec![2, 2, 6, 2]);
        assert_eq!(c.grid_size, 0.04);
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn overrides_and_preset() {
        let c = parse("preset = \"toy\"\nbase_channels = 12\nlr = 0.01\nsteps = 7\naugment_rotate = false\nkp_radius = 0.05\n").unwrap();
        assert_eq!(c.model.base_channels, 12);
        assert_eq!(c.model.depths, vec![2, 2]);
        assert_eq!(c.model.kp_radius, Some(0.05));
        assert_eq!((c.train.lr, c.train.steps), (0.01, 7));
        assert!(!c.train.augment.rotate);
        let s = parse("preset = \"scannet\"").unwrap();
        assert_eq!(s.grid_size, 0.02);
        assert!(s.model.extra_early_downsample);
    }

    #[test]
    fn unknown_and_ill_typed_keys_rejected() {
        assert!(parse("window = 3").unwrap_err().to_string().contains("window"));
        assert!(parse("lr = \"fast\"").is_err());
        assert!(parse("preset = \"nope\"").is_err());
        assert!(parse("depths = []").is_err());
    }
}
