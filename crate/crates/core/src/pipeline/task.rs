use serde::{Deserialize, Serialize};

use super::{compute_grid, AugPolicy, AugPosition, GridSpec, InputFormat};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum AugPreset {
    MocoV2,
    Identity,
}

/// Knobs of the pretext task itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_ratio")]
    pub overlap_ratio: f64,
    #[serde(default = "default_format")]
    pub input_format: InputFormat,
    #[serde(default = "default_position")]
    pub aug_position: AugPosition,
    #[serde(default = "default_preset")]
    pub augmentation: AugPreset,
}

fn default_m() -> usize {
    2
}
fn default_ratio() -> f64 {
    0.3
}
fn default_format() -> InputFormat {
    InputFormat::Montage
}
fn default_position() -> AugPosition {
    AugPosition::AfterSplit
}
fn default_preset() -> AugPreset {
    AugPreset::MocoV2
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            m: default_m(),
            overlap_ratio: default_ratio(),
            input_format: default_format(),
            aug_position: default_position(),
            augmentation: default_preset(),
        }
    }
}

impl TaskConfig {
    pub fn grid(&self, side: usize) -> Result<GridSpec> {
        compute_grid(side, self.m, self.overlap_ratio)
    }

    pub fn policy(&self, grid: &GridSpec) -> AugPolicy {
        match self.augmentation {
            AugPreset::MocoV2 => AugPolicy::moco_v2(self.aug_position, grid.slot),
            AugPreset::Identity => AugPolicy::identity(self.aug_position, grid.slot),
        }
    }
}
