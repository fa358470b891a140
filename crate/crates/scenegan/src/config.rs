//! Run configuration: network geometry, data generation, optimization and
//! evaluation settings. JSON round-trips canonically and unknown keys are
//! rejected.

use crate::data::Scenario;
use crate::error::Error;
use crate::tensor::AdamConfig;
use serde::{Deserialize, Serialize};

/// Which discriminators participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscFlags {
    pub frame: bool,
    pub gradient: bool,
    pub video: bool,
    pub relational: bool,
}

impl DiscFlags {
    pub const ALL: DiscFlags = DiscFlags { frame: true, gradient: true, video: true, relational: true };

    pub fn any(&self) -> bool {
        self.frame || self.gradient || self.video || self.relational
    }
}

impl std::str::FromStr for DiscFlags {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut flags = DiscFlags { frame: false, gradient: false, video: false, relational: false };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_uppercase().as_str() {
                "F" => flags.frame = true,
                "G" => flags.gradient = true,
                "V" => flags.video = true,
                "R" => flags.relational = true,
                other => return Err(format!("unknown discriminator flag '{other}'")),
            }
        }
        if !flags.any() {
            return Err("at least one of F,G,V,R is required".into());
        }
        Ok(flags)
    }
}

impl std::fmt::Display for DiscFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.frame {
            parts.push("F");
        }
        if self.gradient {
            parts.push("G");
        }
        if self.video {
            parts.push("V");
        }
        if self.relational {
            parts.push("R");
        }
        write!(f, "{}", parts.join(","))
    }
}

impl Serialize for DiscFlags {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DiscFlags {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Network geometry. The generator doubles a 4x4x1 seed up to (H, W, T), so
/// the standard configurations satisfy T = H/4 with H = W a power of two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub z_dim: usize,
    pub embed_dim: usize,
    pub context_dim: usize,
    /// Generator channel schedule: seed channels then each block's output
    /// (a final block to 3 RGB channels is implied).
    pub gen_channels: Vec<usize>,
    /// Discriminator trunk widths; the last entry is the conditioning width N.
    pub disc_channels: Vec<usize>,
    /// Context encoder channel schedule.
    pub ctx_channels: Vec<usize>,
    /// Seven graph-convolution output widths.
    pub gcn_widths: Vec<usize>,
    /// Pooled node representations reshape to (last_width / grid^2, grid, grid).
    pub gcn_grid: usize,
    pub crop_embed_dim: usize,
    /// Dropout in generator blocks after the first (the discriminators always
    /// apply dropout before their final layer).
    pub gen_dropout: bool,
    pub dropout_p: f64,
    pub leaky_slope: f64,
    /// Generator loss form: log(1-D) when false (default), -log(D) when true.
    pub nonsaturating: bool,
}

impl ArchitectureConfig {
    /// CPU-sized configuration: 8 frames of 32x32.
    pub fn desk() -> Self {
        ArchitectureConfig {
            frames: 8,
            height: 32,
            width: 32,
            z_dim: 100,
            embed_dim: 300,
            context_dim: 300,
            gen_channels: vec![48, 24, 12],
            disc_channels: vec![12, 24, 48],
            ctx_channels: vec![12, 24, 48, 64],
            gcn_widths: vec![64, 64, 128, 128, 256, 256, 256],
            gcn_grid: 8,
            crop_embed_dim: 60,
            gen_dropout: true,
            dropout_p: 0.3,
            leaky_slope: 0.2,
            nonsaturating: false,
        }
    }

    /// Full-size configuration: 16 frames of 64x64, trunk width 512.
    pub fn paper_scale() -> Self {
        ArchitectureConfig {
            frames: 16,
            height: 64,
            width: 64,
            z_dim: 100,
            embed_dim: 300,
            context_dim: 300,
            gen_channels: vec![512, 256, 128, 64],
            disc_channels: vec![64, 128, 256, 512],
            ctx_channels: vec![64, 128, 256, 512],
            gcn_widths: vec![4096, 4096, 8192, 8192, 16384, 16384, 16384],
            gcn_grid: 8,
            crop_embed_dim: 4096,
            gen_dropout: true,
            dropout_p: 0.3,
            leaky_slope: 0.2,
            nonsaturating: false,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.height != self.width {
            return err(format!("H ({}) must equal W ({})", self.height, self.width));
        }
        if !self.height.is_power_of_two() || self.height < 16 {
            return err(format!("H must be a power of two >= 16, got {}", self.height));
        }
        if self.frames != 8 && self.frames != 16 {
            return err(format!("T must be 8 or 16, got {}", self.frames));
        }
        if self.frames * 4 != self.height {
            return err(format!(
                "generator geometry needs T == H/4 (got T={}, H={})",
                self.frames, self.height
            ));
        }
        let blocks = (self.height / 4).trailing_zeros() as usize;
        if self.gen_channels.len() != blocks {
            return err(format!(
                "gen_channels needs {blocks} entries for H={}, got {}",
                self.height,
                self.gen_channels.len()
            ));
        }
        if self.disc_channels.len() != blocks {
            return err(format!(
                "disc_channels needs {blocks} entries for H={}, got {}",
                self.height,
                self.disc_channels.len()
            ));
        }
        if self.gcn_widths.len() != 7 {
            return err(format!("gcn_widths needs 7 entries, got {}", self.gcn_widths.len()));
        }
        let last = *self.gcn_widths.last().unwrap();
        if last % (self.gcn_grid * self.gcn_grid) != 0 {
            return err(format!(
                "final GCN width {last} must be divisible by grid^2 ({})",
                self.gcn_grid * self.gcn_grid
            ));
        }
        if self.embed_dim != 300 {
            return err(format!("embeddings are 300-dimensional, got {}", self.embed_dim));
        }
        Ok(())
    }

    /// Number of up/down-sampling blocks between 4x4 and HxW.
    pub fn block_count(&self) -> usize {
        (self.height / 4).trailing_zeros() as usize
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub clips_per_composition: usize,
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { clips_per_composition: 40, holdout_fraction: 4.0 / 48.0 }
    }
}

/// Adversarial training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub flags: DiscFlags,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 8,
            steps: 2000,
            flags: DiscFlags::ALL,
            checkpoint_every: 500,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub scenario: Scenario,
    pub classifier_steps: usize,
    pub classifier_batch: usize,
    pub classifier_feature_dim: usize,
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenario: Scenario::Gs1,
            classifier_steps: 1200,
            classifier_batch: 16,
            classifier_feature_dim: 64,
            samples: 96,
        }
    }
}

/// Top-level run configuration. CLI flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchitectureConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchitectureConfig::desk(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 1,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.arch.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }
}
