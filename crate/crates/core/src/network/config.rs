use serde::{Deserialize, Serialize};

use crate::attention::PositionEncoding;
use crate::error::{Error, Result};

/// First-layer point embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingVariant {
    Linear,
    Maxpool,
    Avgpool,
    Kpconv,
}

impl std::str::FromStr for EmbeddingVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "maxpool" => Ok(Self::Maxpool),
            "avgpool" => Ok(Self::Avgpool),
            "kpconv" => Ok(Self::Kpconv),
            other => Err(Error::Config(format!(
                "unknown embedding `{other}` (expected linear, maxpool, avgpool or kpconv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Transformer blocks per encoder stage.
    pub depths: Vec<usize>,
    pub base_channels: usize,
    pub base_heads: usize,
    /// Window size of the first stage, in meters; doubles per stage.
    pub s_win0: f64,
    /// Large-window size relative to the dense window.
    pub s_win_large_factor: f64,
    /// Sparse keys are `ceil(N / s)` farthest-point samples.
    pub downsample_scale: usize,
    pub knn_k: usize,
    /// cRPE bins per axis.
    pub num_bins: usize,
    pub num_classes: usize,
    /// Input feature channels (rgb).
    pub in_channels: usize,
    pub embedding: EmbeddingVariant,
    pub use_crpe: bool,
    /// MLP position bias; only used with `use_crpe = false`.
    pub use_mlp_bias: bool,
    pub mlp_hidden: usize,
    pub use_stratified: bool,
    pub use_shift: bool,
    /// Shift the dense windows on odd blocks.
    pub shift_small: bool,
    /// Shift the large windows on odd blocks.
    pub shift_large: bool,
    pub extra_early_downsample: bool,
    /// Scale query by `1/sqrt(head_dim)`.
    pub scale_logits: bool,
    pub ffn_ratio: usize,
    /// Append recentred xyz to the input features.
    pub use_xyz_features: bool,
    /// Translate positions so the bounding-box minimum is the origin.
    pub recenter: bool,
    /// Kernel-point radius and influence; `None` means `s_win0 / 2`.
    pub kp_radius: Option<f64>,
    pub kp_sigma: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::s3dis()
    }
}

impl ModelConfig {
    pub fn s3dis() -> Self {
        ModelConfig {
            depths: vec![2, 2, 6, 2],
            base_channels: 48,
            base_heads: 3,
            s_win0: 0.16,
            s_win_large_factor: 2.0,
            downsample_scale: 8,
            knn_k: 16,
            num_bins: 16,
            num_classes: 13,
            in_channels: 3,
            embedding: EmbeddingVariant::Kpconv,
            use_crpe: true,
            use_mlp_bias: false,
            mlp_hidden: 16,
            use_stratified: true,
            use_shift: true,
            shift_small: true,
            shift_large: true,
            extra_early_downsample: false,
            scale_logits: true,
            ffn_ratio: 4,
            use_xyz_features: true,
            recenter: true,
            kp_radius: None,
            kp_sigma: None,
        }
    }

    pub fn scannet() -> Self {
        ModelConfig {
            depths: vec![3, 9, 3, 3],
            s_win0: 0.1,
            downsample_scale: 4,
            num_classes: 20,
            extra_early_downsample: true,
            ..Self::s3dis()
        }
    }

    /// Desk-scale model: two stages of two blocks, 24 base channels.
    pub fn toy() -> Self {
        ModelConfig {
            depths: vec![2, 2],
            base_channels: 24,
            base_heads: 3,
            num_classes: 2,
            ..Self::s3dis()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "s3dis" => Ok(Self::s3dis()),
            "scannet" => Ok(Self::scannet()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected s3dis, scannet or toy)"))),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn heads(&self, stage: usize) -> usize {
        self.base_heads << stage
    }

    pub fn s_win(&self, stage: usize) -> f64 {
        self.s_win0 * (1u64 << stage) as f64
    }

    pub fn s_win_large(&self, stage: usize) -> f64 {
        self.s_win(stage) * self.s_win_large_factor
    }

    pub fn input_channels(&self) -> usize {
        self.in_channels + if self.use_xyz_features { 3 } else { 0 }
    }

    pub fn position_encoding(&self) -> PositionEncoding {
        if self.use_crpe {
            PositionEncoding::Crpe { bins: self.num_bins }
        } else if self.use_mlp_bias {
            PositionEncoding::Mlp { hidden: self.mlp_hidden }
        } else {
            PositionEncoding::None
        }
    }

    pub fn kp_radius(&self) -> f64 {
        self.kp_radius.unwrap_or(self.s_win0 / 2.0)
    }

    pub fn kp_sigma(&self) -> f64 {
        self.kp_sigma.unwrap_or(self.s_win0 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.contains(&0) {
            return fail(format!("depths must be non-empty and positive, got {:?}", self.depths));
        }
        if self.depths.len() > 8 {
            return fail(format!("at most 8 stages are supported, got {}", self.depths.len()));
        }
        if self.base_channels == 0 || self.base_heads == 0 || !self.base_channels.is_multiple_of(self.base_heads) {
            return fail(format!(
                "base_channels {} must be a positive multiple of base_heads {}",
                self.base_channels, self.base_heads
            ));
        }
        if !(self.s_win0 > 0.0 && self.s_win0.is_finite()) {
            return fail(format!("s_win0 must be positive, got {}", self.s_win0));
        }
        if !(self.s_win_large_factor >= 1.0 && self.s_win_large_factor.is_finite()) {
            return fail(format!("s_win_large_factor must be >= 1, got {}", self.s_win_large_factor));
        }
        if self.downsample_scale == 0 {
            return fail("downsample_scale must be >= 1".into());
        }
        if self.knn_k == 0 {
            return fail("knn_k must be >= 1".into());
        }
        if self.num_bins < 2 || !self.num_bins.is_multiple_of(2) {
            return fail(format!("num_bins must be even and >= 2, got {}", self.num_bins));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be >= 1".into());
        }
        if self.input_channels() == 0 {
            return fail("model has no input channels".into());
        }
        if self.ffn_ratio == 0 || (self.use_mlp_bias && self.mlp_hidden == 0) {
            return fail("ffn_ratio and mlp_hidden must be >= 1".into());
        }
        if self.use_crpe && self.use_mlp_bias {
            return fail("use_crpe and use_mlp_bias are mutually exclusive".into());
        }
        for (name, v) in [("kp_radius", self.kp_radius), ("kp_sigma", self.kp_sigma)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) || (name == "kp_sigma" && v == 0.0) {
                    return fail(format!("{name} out of range: {v}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["s3dis", "scannet", "toy"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        let c = ModelConfig::s3dis();
        assert_eq!((c.channels(3), c.heads(3), c.s_win(2)), (384, 24, 0.64));
        assert!(ModelConfig::preset("kitti").is_err());
    }

    #[test]
    fn rejects_bad_heads() {
        let c = ModelConfig {
            base_heads: 5,
            ..ModelConfig::toy()
        };
        assert!(c.validate().is_err());
    }
}
