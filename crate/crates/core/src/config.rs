//! Model hyperparameters. Every architectural choice lives here so that a
//! run is fully described by one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    /// Full-resolution disparity range; the volume holds `max_disparity / 4` levels.
    pub max_disparity: usize,
    pub num_groups: usize,
    pub topk: usize,
    pub ghost_ratio: usize,
    pub se_reduction: usize,
    pub use_se: bool,
    /// Multiply left-image context into the correlation volume.
    pub use_cve: bool,
    /// Ghost bottlenecks in the hourglass; `false` uses dense 3×3×3 convolutions.
    pub use_cva: bool,
    pub stem_channels: usize,
    /// Encoder widths at 1/4, 1/8, 1/16, 1/32 resolution.
    pub feature_channels: [usize; 4],
    /// Bottlenecks per encoder stage (the first one downsamples).
    pub encoder_depths: [usize; 4],
    /// Bottleneck hidden width as a multiple of its input width.
    pub expansion: usize,
    pub bypass_channels: usize,
    pub fused_channels: usize,
    /// Hourglass widths at 1/4, 1/8, 1/16, 1/32 of image resolution; the
    /// first must equal `num_groups`.
    pub aggregation_channels: [usize; 4],
    pub upsample_head_channels: usize,
    /// Weights of the quarter- and full-resolution loss terms.
    pub loss_weights: [f64; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::paper()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small widths for CPU-scale runs on 64-pixel-high images.
    Desk,
    /// Full-size widths and the full-scale training recipe.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            schema_version: SCHEMA_VERSION,
            max_disparity: 192,
            num_groups: 32,
            topk: 2,
            ghost_ratio: 2,
            se_reduction: 4,
            use_se: true,
            use_cve: true,
            use_cva: true,
            stem_channels: 16,
            feature_channels: [24, 40, 80, 160],
            encoder_depths: [2, 2, 3, 2],
            expansion: 2,
            bypass_channels: 32,
            fused_channels: 320,
            aggregation_channels: [32, 64, 128, 192],
            upsample_head_channels: 64,
            loss_weights: [0.3, 1.0],
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            max_disparity: 32,
            num_groups: 8,
            stem_channels: 8,
            feature_channels: [16, 24, 32, 48],
            encoder_depths: [1, 1, 1, 1],
            bypass_channels: 16,
            fused_channels: 32,
            aggregation_channels: [8, 16, 32, 48],
            upsample_head_channels: 32,
            ..ModelConfig::paper()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
        }
    }

    pub fn disparity_levels(&self) -> usize {
        self.max_disparity / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        // The hourglass halves the disparity axis three times below quarter
        // resolution, so D/4 must be a multiple of 8.
        if self.max_disparity == 0 || !self.max_disparity.is_multiple_of(32) {
            return bad(format!(
                "max_disparity must be a positive multiple of 32, got {}",
                self.max_disparity
            ));
        }
        if self.num_groups == 0 || !self.fused_channels.is_multiple_of(self.num_groups) {
            return Err(Error::GroupDivisibility {
                channels: self.fused_channels,
                groups: self.num_groups,
            });
        }
        if self.topk == 0 || self.topk > self.disparity_levels() {
            return Err(Error::TopKOutOfRange {
                k: self.topk,
                levels: self.disparity_levels(),
            });
        }
        if self.ghost_ratio == 0 || self.expansion == 0 || self.se_reduction == 0 {
            return bad("ghost_ratio, expansion and se_reduction must be positive".into());
        }
        if self.aggregation_channels[0] != self.num_groups {
            return bad(format!(
                "aggregation_channels[0] = {} must equal num_groups = {}",
                self.aggregation_channels[0], self.num_groups
            ));
        }
        if self.fused_channels < 2 {
            return bad("fused_channels must be at least 2".into());
        }
        let widths = [self.stem_channels, self.bypass_channels, self.upsample_head_channels];
        if widths
            .iter()
            .chain(&self.feature_channels)
            .chain(&self.aggregation_channels)
            .any(|&c| c == 0)
        {
            return bad("channel widths must be positive".into());
        }
        if self.encoder_depths.contains(&0) {
            return bad("every encoder stage needs at least one bottleneck".into());
        }
        if self.use_se {
            let mut hidden: Vec<usize> = vec![self.stem_channels * self.expansion];
            hidden.extend(self.feature_channels.iter().map(|c| c * self.expansion));
            hidden.extend(self.aggregation_channels.iter().map(|c| c * self.expansion));
            if let Some(&c) = hidden.iter().find(|&&c| c % self.se_reduction != 0) {
                return Err(Error::ReductionDivisibility {
                    channels: c,
                    reduction: self.se_reduction,
                });
            }
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad(format!(
                "loss weights must be finite and non-negative, got {:?}",
                self.loss_weights
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::desk().disparity_levels(), 8);
        assert_eq!(
            ModelConfig::paper().fused_channels / ModelConfig::paper().num_groups,
            10
        );
    }

    #[test]
    fn json_round_trip() {
        let cfg = ModelConfig {
            use_cve: false,
            seed: 7,
            ..ModelConfig::desk()
        };
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ModelConfig::desk().to_json()).unwrap();
        v["dropout"] = 0.5.into();
        assert!(matches!(ModelConfig::from_json(&v.to_string()), Err(Error::Json(_))));
    }

    #[test]
    fn invalid_configs() {
        let d = ModelConfig::desk();
        assert!(ModelConfig {
            max_disparity: 30,
            ..d.clone()
        }
        .validate()
        .is_err());
        assert!(matches!(
            ModelConfig {
                num_groups: 5,
                ..d.clone()
            }
            .validate(),
            Err(Error::GroupDivisibility { .. })
        ));
        assert!(matches!(
            ModelConfig { topk: 9, ..d.clone() }.validate(),
            Err(Error::TopKOutOfRange { k: 9, levels: 8 })
        ));
        assert!(ModelConfig {
            schema_version: 2,
            ..d.clone()
        }
        .validate()
        .is_err());
        assert!(ModelConfig { se_reduction: 3, ..d }.validate().is_err());
    }
}
