//! Stacked quantization modules: greedy per-level training, multi-level decoding and
//! adaptive selection of the storage level.

mod module;
mod stack;

pub use module::{AqmModule, LevelCodes};
pub use stack::{AqmStack, FreezeMonitor, TrainStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vq::{self, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS};

/// Input geometry `(channels, height, width)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

fn default_kernel() -> usize {
    3
}

fn default_mix_kernel() -> usize {
    1
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    /// Latent channel count `D` (split evenly across codebooks).
    pub latent_channels: usize,
    /// Entries per codebook `K`.
    pub codebook_size: usize,
    /// Codebooks per level `Nc`.
    #[serde(default = "default_one")]
    pub num_codebooks: usize,
    /// Number of stride-2 stages; each halves the spatial size.
    #[serde(default = "default_one")]
    pub downsample: usize,
    /// Spatial kernel of the resampling convolutions.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Kernel of the stride-1 channel-mixing convolutions.
    #[serde(default = "default_mix_kernel")]
    pub mix_kernel: usize,
    /// Encoder and decoder are the identity; the level is a bare codebook.
    #[serde(default)]
    pub identity: bool,
    /// Per-level learning rate override.
    #[serde(default)]
    pub lr: Option<f64>,
}

impl LevelConfig {
    pub fn new(latent_channels: usize, codebook_size: usize, downsample: usize) -> Self {
        Self {
            latent_channels,
            codebook_size,
            num_codebooks: 1,
            downsample,
            kernel: 3,
            mix_kernel: 1,
            identity: false,
            lr: None,
        }
    }

    pub fn identity(channels: usize, codebook_size: usize) -> Self {
        Self { identity: true, downsample: 0, ..Self::new(channels, codebook_size, 0) }
    }
}

fn default_beta() -> f64 {
    0.25
}
fn default_decay() -> f64 {
    DEFAULT_DECAY
}
fn default_eps() -> f64 {
    DEFAULT_LAPLACE_EPS
}
fn default_lr() -> f64 {
    1e-3
}
fn default_window() -> usize {
    20
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    /// Filled from the data source when omitted.
    #[serde(default)]
    pub input: InputShape,
    pub levels: Vec<LevelConfig>,
    /// Commitment coefficient.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_eps")]
    pub laplace_eps: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Trailing window (in batches) for the freeze trigger.
    #[serde(default = "default_window")]
    pub freeze_window: usize,
    /// Per-level streaming-MSE threshold below which the level's codebooks freeze.
    /// Missing entries never freeze.
    #[serde(default)]
    pub freeze_thresholds: Vec<f64>,
    /// Freeze trigger enabled.
    #[serde(default = "default_true")]
    pub freeze: bool,
    /// Store at the deepest qualifying level; when false always the deepest level.
    #[serde(default = "default_true")]
    pub adaptive: bool,
    /// Train all levels end-to-end through one loss instead of greedily.
    #[serde(default)]
    pub coupled: bool,
    /// Update modules concurrently during a greedy train step.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub seed: u64,
}

impl StackConfig {
    pub fn new(input: InputShape, levels: Vec<LevelConfig>) -> Self {
        Self {
            input,
            levels,
            beta: default_beta(),
            ema_decay: DEFAULT_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
            lr: default_lr(),
            freeze_window: default_window(),
            freeze_thresholds: Vec::new(),
            freeze: true,
            adaptive: true,
            coupled: false,
            parallel: false,
            seed: 0,
        }
    }

    /// `(channels, height, width)` consumed by each level, plus the final latent.
    pub fn level_shapes(&self) -> Result<Vec<([usize; 3], [usize; 3])>> {
        let mut cur = self.input.dims();
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, lv) in self.levels.iter().enumerate() {
            if lv.num_codebooks == 0 || lv.latent_channels % lv.num_codebooks != 0 {
                return Err(Error::Config(format!(
                    "level {}: {} latent channels do not split across {} codebooks",
                    i + 1,
                    lv.latent_channels,
                    lv.num_codebooks
                )));
            }
            if lv.codebook_size < 2 {
                return Err(Error::Config(format!("level {}: K must be >= 2", i + 1)));
            }
            let latent = if lv.identity {
                if lv.latent_channels != cur[0] {
                    return Err(Error::Config(format!(
                        "level {}: identity codec needs latent channels {} == input channels {}",
                        i + 1,
                        lv.latent_channels,
                        cur[0]
                    )));
                }
                cur
            } else {
                let scale = 1usize << lv.downsample;
                if !cur[1].is_multiple_of(scale) || !cur[2].is_multiple_of(scale) {
                    return Err(Error::Config(format!(
                        "level {}: {}x{} input is not divisible by {scale}",
                        i + 1,
                        cur[1],
                        cur[2]
                    )));
                }
                [lv.latent_channels, cur[1] / scale, cur[2] / scale]
            };
            out.push((cur, latent));
            cur = latent;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.numel() == 0 {
            return Err(Error::Config("input dims must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds i64::MAX", self.seed)));
        }
        if self.freeze_window == 0 {
            return Err(Error::Config("freeze_window must be >= 1".into()));
        }
        self.level_shapes().map(|_| ())
    }
}

/// Exact compression factor of a level as a reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompressionRate {
    pub numerator: u64,
    pub denominator: u64,
}

impl CompressionRate {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `H*W*C*8 / (Nc * Hh * Wh * ceil(log2 K))`.
pub fn compression_rate(
    input: InputShape,
    latent_height: usize,
    latent_width: usize,
    num_codebooks: usize,
    codebook_size: usize,
) -> Result<CompressionRate> {
    if codebook_size < 2 {
        return Err(Error::Config(format!("compression rate needs K >= 2, got {codebook_size}")));
    }
    if input.numel() == 0 || latent_height == 0 || latent_width == 0 || num_codebooks == 0 {
        return Err(Error::Config("compression rate needs positive dims".into()));
    }
    let num = (input.numel() * 8) as u64;
    let den = (num_codebooks * latent_height * latent_width) as u64 * vq::index_bits(codebook_size) as u64;
    let g = gcd(num, den);
    Ok(CompressionRate { numerator: num / g, denominator: den / g })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rates() {
        let r = compression_rate(InputShape::new(3, 32, 32), 16, 16, 1, 128).unwrap();
        assert_eq!((r.numerator, r.denominator), (96, 7));
        assert!((r.value() - 13.714).abs() < 1e-3);
        let img = InputShape::new(3, 128, 128);
        assert_eq!(compression_rate(img, 64, 64, 1, 16).unwrap().value(), 24.0);
        assert_eq!(compression_rate(img, 32, 32, 1, 256).unwrap().value(), 48.0);
        assert_eq!(compression_rate(img, 32, 32, 1, 32).unwrap().value(), 76.8);
    }

    #[test]
    fn rate_rejects_tiny_codebook() {
        assert!(compression_rate(InputShape::new(1, 8, 8), 4, 4, 1, 1).is_err());
    }

    #[test]
    fn level_shapes_chain() {
        let cfg = StackConfig::new(
            InputShape::new(1, 8, 8),
            vec![LevelConfig::new(8, 16, 1), LevelConfig::new(8, 16, 1), LevelConfig::identity(8, 4)],
        );
        let shapes = cfg.level_shapes().unwrap();
        assert_eq!(shapes[0], ([1, 8, 8], [8, 4, 4]));
        assert_eq!(shapes[1], ([8, 4, 4], [8, 2, 2]));
        assert_eq!(shapes[2], ([8, 2, 2], [8, 2, 2]));
    }

    #[test]
    fn bad_codebook_split_rejected() {
        let mut lv = LevelConfig::new(9, 16, 1);
        lv.num_codebooks = 2;
        let cfg = StackConfig::new(InputShape::new(1, 8, 8), vec![lv]);
        assert!(cfg.validate().is_err());
    }
}
