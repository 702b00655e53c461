//! Named hyperparameter bundles. The toy profile is sized for CPU training
//! in minutes; the full-scale profile matches the published architecture
//! widths and is used for structural checks (shapes, parameter counts).

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Profile {
    pub name: &'static str,
    /// Token width of the fusion network.
    pub d: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Fusion layer count N.
    pub n_layers: usize,
    /// Backbone output channels.
    pub c: usize,
    /// Template crop side in pixels.
    pub template_size: usize,
    /// Search crop side in pixels.
    pub search_size: usize,
    /// Default template bank capacity.
    pub m: usize,
    pub backbone: BackboneConfig,
}

impl Profile {
    pub fn toy() -> Self {
        Profile {
            name: "toy",
            d: 64,
            n_heads: 4,
            d_ffn: 256,
            n_layers: 2,
            c: 64,
            template_size: 64,
            search_size: 128,
            m: 2,
            backbone: BackboneConfig { stage_channels: [16, 32, 48, 64], convs_per_stage: 2 },
        }
    }

    pub fn paper() -> Self {
        Profile {
            name: "paper",
            d: 256,
            n_heads: 8,
            d_ffn: 2048,
            n_layers: 4,
            c: 1024,
            template_size: 128,
            search_size: 256,
            m: 2,
            backbone: BackboneConfig { stage_channels: [32, 64, 128, 1024], convs_per_stage: 1 },
        }
    }

    /// Minimal widths for fast unit tests and doc examples. Not tuned for
    /// tracking quality.
    pub fn mini() -> Self {
        Profile {
            name: "mini",
            d: 8,
            n_heads: 2,
            d_ffn: 16,
            n_layers: 1,
            c: 8,
            template_size: 16,
            search_size: 32,
            m: 2,
            backbone: BackboneConfig { stage_channels: [4, 5, 6, 8], convs_per_stage: 1 },
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            "mini" => Ok(Self::mini()),
            other => Err(Error::Config(format!("unknown profile '{other}'"))),
        }
    }

    /// Template token grid (stride 8).
    pub fn template_grid(&self) -> (usize, usize) {
        (self.template_size / 8, self.template_size / 8)
    }

    /// Search token grid (stride 8).
    pub fn search_grid(&self) -> (usize, usize) {
        (self.search_size / 8, self.search_size / 8)
    }
}
