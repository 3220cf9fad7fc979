use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet18,
    Resnet50,
    /// Four stride-2 stages, ~0.3M parameters; for desk-scale runs.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeckKind {
    Fpn,
    Pafpn,
}

/// Anchor layout: sizes are `base_scale * stride * s` for each octave scale
/// `s`, and each ratio `r = height / width` gives `w = size / sqrt(r)`,
/// `h = size * sqrt(r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub base_scale: f32,
    pub scales: Vec<f32>,
    pub ratios: Vec<f32>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            base_scale: 4.0,
            scales: vec![1.0, 2f32.powf(1.0 / 3.0), 2f32.powf(2.0 / 3.0)],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub backbone: BackboneKind,
    pub neck: NeckKind,
    pub pyramid_strides: Vec<usize>,
    pub neck_channels: usize,
    pub det_classes: usize,
    pub seg_classes: usize,
    pub heads: Vec<Task>,
    /// Conv layers in each detection tower.
    pub tower_depth: usize,
    pub anchors: AnchorConfig,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::student()
    }
}

impl NetworkSpec {
    /// ResNet18 + FPN with both heads.
    pub fn student() -> Self {
        Self {
            backbone: BackboneKind::Resnet18,
            neck: NeckKind::Fpn,
            pyramid_strides: vec![8, 16, 32, 64, 128],
            neck_channels: 256,
            det_classes: 3,
            seg_classes: 6,
            heads: vec![Task::Detection, Task::Segmentation],
            tower_depth: 4,
            anchors: AnchorConfig::default(),
        }
    }

    /// ResNet50 + PAFPN with both heads.
    pub fn teacher() -> Self {
        Self {
            backbone: BackboneKind::Resnet50,
            neck: NeckKind::Pafpn,
            ..Self::student()
        }
    }

    /// Small network for desk-scale runs and tests.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            neck: NeckKind::Fpn,
            neck_channels: 32,
            tower_depth: 2,
            anchors: AnchorConfig {
                base_scale: 2.0,
                ..AnchorConfig::default()
            },
            ..Self::student()
        }
    }

    pub fn with_heads(mut self, heads: &[Task]) -> Self {
        self.heads = heads.to_vec();
        self
    }

    pub fn has_head(&self, task: Task) -> bool {
        self.heads.contains(&task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("network needs at least one head".into()));
        }
        let s = &self.pyramid_strides;
        if s.is_empty() {
            return Err(Error::Config("pyramid_strides must not be empty".into()));
        }
        if s.iter().any(|v| !v.is_power_of_two()) || s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "pyramid_strides must be strictly increasing powers of two, got {s:?}"
            )));
        }
        if s[0] < 4 || s[0] > 32 {
            return Err(Error::Config(format!(
                "the first pyramid stride must be a backbone stride (4..=32), got {}",
                s[0]
            )));
        }
        if s.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "pyramid_strides must double from level to level, got {s:?}"
            )));
        }
        if self.neck_channels == 0 || self.neck_channels % 2 != 0 {
            return Err(Error::Config("neck_channels must be a positive even number".into()));
        }
        if self.has_head(Task::Detection) && self.det_classes == 0 {
            return Err(Error::Config("det_classes must be positive".into()));
        }
        if self.has_head(Task::Segmentation) && self.seg_classes == 0 {
            return Err(Error::Config("seg_classes must be positive".into()));
        }
        if self.anchors.scales.is_empty() || self.anchors.ratios.is_empty() {
            return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.anchors.scales.iter().chain(&self.anchors.ratios).any(|v| *v <= 0.0)
            || self.anchors.base_scale <= 0.0
        {
            return Err(Error::Config("anchor sizes must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of each pyramid level for an input of `h`×`w`.
    pub fn level_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.pyramid_strides
            .iter()
            .map(|s| (h.div_ceil(*s), w.div_ceil(*s)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sizes_use_ceil_division() {
        let spec = NetworkSpec::student();
        assert_eq!(
            spec.level_sizes(320, 320),
            vec![(40, 40), (20, 20), (10, 10), (5, 5), (3, 3)]
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = NetworkSpec::tiny();
        s.heads.clear();
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::tiny();
        s.pyramid_strides = vec![8, 24];
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::tiny();
        s.pyramid_strides = vec![16, 8];
        assert!(s.validate().is_err());
    }

    #[test]
    fn unknown_backbone_name_is_a_parse_error() {
        let err = toml::from_str::<NetworkSpec>("backbone = \"vgg16\"").unwrap_err();
        assert!(err.to_string().contains("vgg16"));
    }

    #[test]
    fn toml_round_trip() {
        let s = NetworkSpec::teacher();
        let back: NetworkSpec = toml::from_str(&toml::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
