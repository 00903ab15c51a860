//! Model and training hyperparameters.
//!
//! Both configs serialize to TOML; every field has a default so partial
//! files override only what they name.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonlinearity applied after every stem layer and every decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

/// Where a spectral branch is attached and how it is shaped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsoPlacement {
    /// Decoder block the branch runs alongside (0-based).
    pub block: usize,
    pub modes_h: usize,
    pub modes_w: usize,
    /// Sum with the convolution branch; when false the block is spectral only.
    #[serde(default = "yes")]
    pub combine_with_conv: bool,
    /// Learn the imaginary part of the spectral weights.
    #[serde(default = "yes")]
    pub use_imaginary: bool,
}

fn yes() -> bool {
    true
}

impl FsoPlacement {
    pub fn new(block: usize, modes_h: usize, modes_w: usize) -> Self {
        Self { block, modes_h, modes_w, combine_with_conv: true, use_imaginary: true }
    }
}

/// Parses `block:modes_h:modes_w[:noconv][:noimag]`.
impl FromStr for FsoPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() < 3 {
            return Err(Error::Config(format!(
                "fso placement `{s}` must look like block:modes_h:modes_w[:noconv][:noimag]"
            )));
        }
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("fso placement `{s}`: `{p}` is not an integer")))
        };
        let mut placement = FsoPlacement::new(num(parts[0])?, num(parts[1])?, num(parts[2])?);
        for flag in &parts[3..] {
            match *flag {
                "noconv" => placement.combine_with_conv = false,
                "noimag" => placement.use_imaginary = false,
                other => {
                    return Err(Error::Config(format!("fso placement `{s}`: unknown flag `{other}`")))
                }
            }
        }
        Ok(placement)
    }
}

impl fmt::Display for FsoPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.block, self.modes_h, self.modes_w)?;
        if !self.combine_with_conv {
            f.write_str(":noconv")?;
        }
        if !self.use_imaginary {
            f.write_str(":noimag")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_base: f64,
    /// Frequencies per index; the embedding has `4 * embed_levels` entries.
    pub embed_levels: usize,
    /// Session count used to normalize the session index into (0, 1].
    pub max_sessions: usize,
    /// Stem MLP widths, input first; the last entry is `C0 * h0 * w0`.
    pub stem_dims: Vec<usize>,
    pub stem_bias: bool,
    pub base_spatial: (usize, usize),
    pub upscale_factors: Vec<usize>,
    pub block_channels: Vec<usize>,
    pub min_channel_width: usize,
    pub fso: Vec<FsoPlacement>,
    /// Per-layer fraction of weights a session may select.
    pub capacity: f64,
    pub head_channels: usize,
    pub activation: Activation,
    pub output_squash: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-resolution architecture: 16x9 base grid decoded to 1280x720.
    pub fn full() -> Self {
        Self {
            embed_base: 1.25,
            embed_levels: 40,
            max_sessions: 8,
            stem_dims: vec![160, 512, 112 * 16 * 9],
            stem_bias: false,
            base_spatial: (16, 9),
            upscale_factors: vec![5, 2, 2, 2, 2],
            block_channels: vec![112, 96, 96, 96, 96],
            min_channel_width: 96,
            fso: vec![FsoPlacement::new(0, 16, 4), FsoPlacement::new(1, 80, 22)],
            capacity: 0.5,
            head_channels: 3,
            activation: Activation::Gelu,
            output_squash: true,
        }
    }

    /// Small architecture decoding 16x16 frames from a 4x4 grid.
    pub fn desk() -> Self {
        Self {
            embed_base: 1.25,
            embed_levels: 40,
            max_sessions: 8,
            stem_dims: vec![160, 32, 8 * 4 * 4],
            stem_bias: false,
            base_spatial: (4, 4),
            upscale_factors: vec![2, 2],
            block_channels: vec![8, 8],
            min_channel_width: 8,
            fso: vec![FsoPlacement::new(1, 4, 4)],
            capacity: 0.5,
            head_channels: 3,
            activation: Activation::Gelu,
            output_squash: true,
        }
    }

    pub fn embed_dim(&self) -> usize {
        4 * self.embed_levels
    }

    /// Channel count of the stem output grid.
    pub fn stem_channels(&self) -> usize {
        let (h, w) = self.base_spatial;
        self.stem_dims.last().copied().unwrap_or(0) / (h * w).max(1)
    }

    pub fn block_in_channels(&self, block: usize) -> usize {
        if block == 0 {
            self.stem_channels()
        } else {
            self.block_channels[block - 1]
        }
    }

    /// Spatial size entering block `block` (equal to the stem grid for block 0).
    pub fn block_in_spatial(&self, block: usize) -> (usize, usize) {
        let f: usize = self.upscale_factors[..block].iter().product();
        (self.base_spatial.0 * f, self.base_spatial.1 * f)
    }

    pub fn block_out_spatial(&self, block: usize) -> (usize, usize) {
        let (h, w) = self.block_in_spatial(block);
        (h * self.upscale_factors[block], w * self.upscale_factors[block])
    }

    pub fn output_spatial(&self) -> (usize, usize) {
        self.block_in_spatial(self.upscale_factors.len())
    }

    pub fn trunk_channels(&self) -> usize {
        *self.block_channels.last().unwrap_or(&self.stem_channels())
    }

    pub fn fso_for_block(&self, block: usize) -> Option<&FsoPlacement> {
        self.fso.iter().find(|p| p.block == block)
    }

    pub fn block_has_conv(&self, block: usize) -> bool {
        self.fso_for_block(block).is_none_or(|p| p.combine_with_conv)
    }

    /// The same decoder without spectral branches, its first stem hidden
    /// layer widened until the parameter total is at least this config's.
    pub fn mask_only_matched(&self) -> ModelConfig {
        let target = crate::model::total_parameters(self);
        let mut base = self.clone();
        base.fso.clear();
        if base.stem_dims.len() > 2 {
            while crate::model::total_parameters(&base) < target {
                base.stem_dims[1] += 1;
            }
        }
        base
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.embed_base.is_finite() && self.embed_base > 0.0) {
            return bad(format!("embed_base must be positive, got {}", self.embed_base));
        }
        if self.embed_levels == 0 {
            return bad("embed_levels must be positive".into());
        }
        if self.max_sessions == 0 {
            return bad("max_sessions must be positive".into());
        }
        if self.stem_dims.len() < 2 {
            return bad("stem_dims needs at least an input and an output width".into());
        }
        if self.stem_dims[0] != self.embed_dim() {
            return bad(format!(
                "stem_dims[0] = {} but the positional encoding has {} entries",
                self.stem_dims[0],
                self.embed_dim()
            ));
        }
        if self.stem_dims.contains(&0) {
            return bad("stem_dims entries must be positive".into());
        }
        let (h0, w0) = self.base_spatial;
        if h0 == 0 || w0 == 0 {
            return bad("base_spatial must be positive".into());
        }
        let last = *self.stem_dims.last().unwrap();
        if !last.is_multiple_of(h0 * w0) {
            return bad(format!("stem output {last} is not a multiple of {h0}x{w0}"));
        }
        if self.upscale_factors.len() != self.block_channels.len() {
            return bad(format!(
                "{} upscale factors for {} blocks",
                self.upscale_factors.len(),
                self.block_channels.len()
            ));
        }
        if self.upscale_factors.contains(&0) {
            return bad("upscale factors must be positive".into());
        }
        if let Some(&c) = self.block_channels.iter().find(|&&c| c < self.min_channel_width) {
            return bad(format!("block width {c} below min_channel_width {}", self.min_channel_width));
        }
        if !(self.capacity > 0.0 && self.capacity <= 1.0) {
            return bad(format!("capacity must lie in (0, 1], got {}", self.capacity));
        }
        if self.head_channels == 0 {
            return bad("head_channels must be positive".into());
        }
        for (i, p) in self.fso.iter().enumerate() {
            if p.block >= self.block_channels.len() {
                return bad(format!("fso placement {p} names block {} of {}", p.block, self.block_channels.len()));
            }
            if self.fso[..i].iter().any(|q| q.block == p.block) {
                return bad(format!("two fso placements on block {}", p.block));
            }
            let (hin, win) = self.block_in_spatial(p.block);
            if p.modes_h == 0 || p.modes_w == 0 {
                return bad(format!("fso placement {p} keeps no modes"));
            }
            if p.modes_h > hin || p.modes_w > win / 2 + 1 {
                return bad(format!(
                    "fso placement {p}: {}x{} modes exceed the {}x{} spectrum of a {hin}x{win} input",
                    p.modes_h,
                    p.modes_w,
                    hin,
                    win / 2 + 1
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the L1 term; SSIM gets `1 - alpha`.
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            alpha: 0.7,
            lr: 5e-4,
            epochs: 150,
            warmup_epochs: 30,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }

    /// 500 epochs over 4-frame sessions gives 2000 steps per session.
    pub fn desk() -> Self {
        Self { lr: 5e-3, epochs: 500, warmup_epochs: 50, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size != 1 {
            return bad(format!("only batch_size 1 is supported, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn matched_baseline_has_no_fso_and_at_least_the_budget() {
        let cfg = ModelConfig::desk();
        let base = cfg.mask_only_matched();
        let (a, b) = (crate::model::total_parameters(&cfg), crate::model::total_parameters(&base));
        assert!(base.fso.is_empty());
        // overshoot is below one extra hidden unit
        let unit = base.stem_dims[0] + base.stem_dims[2];
        assert!(b >= a && b - a < unit, "{a} vs {b}");
        base.validate().unwrap();
    }

    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        TrainConfig::full().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn full_output_is_1280_by_720() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.output_spatial(), (1280, 720));
        assert_eq!(cfg.stem_channels(), 112);
        assert_eq!(cfg.block_in_spatial(1), (80, 45));
    }

    #[test]
    fn placement_string_round_trip() {
        let p: FsoPlacement = "1:4:3:noconv:noimag".parse().unwrap();
        assert_eq!(p.block, 1);
        assert_eq!((p.modes_h, p.modes_w), (4, 3));
        assert!(!p.combine_with_conv && !p.use_imaginary);
        assert_eq!(p.to_string(), "1:4:3:noconv:noimag");
        assert!("1:4".parse::<FsoPlacement>().is_err());
        assert!("1:4:4:wide".parse::<FsoPlacement>().is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ModelConfig::desk();
        cfg.upscale_factors.push(2);
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.stem_dims[0] = 80;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.fso = vec![FsoPlacement::new(5, 2, 2)];
        assert!(cfg.validate().is_err());

        // 4x4 input only has 3 real-FFT columns
        let mut cfg = ModelConfig::desk();
        cfg.fso = vec![FsoPlacement::new(0, 4, 4)];
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.capacity = 0.0;
        assert!(cfg.validate().is_err());

        let mut t = TrainConfig::desk();
        t.warmup_epochs = t.epochs + 1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_partial_override() {
        let cfg = ModelConfig::desk();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

        let partial = ModelConfig::from_toml("capacity = 0.25\n").unwrap();
        assert_eq!(partial.capacity, 0.25);
        assert_eq!(partial.block_channels, cfg.block_channels);
    }
}
