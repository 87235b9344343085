#![allow(dead_code)]

use aqm::autodiff::Tensor;
use aqm::codes::{CompressedSample, IndexGrid, Payload};
use aqm::memory::Compressor;
use aqm::Result;

/// Deterministic stand-in for a compression stack. The first pixel picks the level:
/// below `raw_below` stays raw, below `deep_from` goes to level 1, otherwise level 2.
/// Decoding shifts the first pixel by `drift`, so refreshes can change levels.
#[derive(Clone, Debug)]
pub struct MockCompressor {
    pub dims: [usize; 3],
    pub raw_below: f64,
    pub deep_from: f64,
    pub level1_indices: usize,
    pub level2_indices: usize,
    pub drift: f64,
}

impl MockCompressor {
    /// Every sample stays raw.
    pub fn raw(dims: [usize; 3]) -> Self {
        Self { dims, raw_below: f64::INFINITY, deep_from: f64::INFINITY, level1_indices: 8, level2_indices: 2, drift: 0.0 }
    }

    pub fn leveled(dims: [usize; 3], drift: f64) -> Self {
        Self { dims, raw_below: 0.3, deep_from: 0.6, level1_indices: 16, level2_indices: 4, drift }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    fn encode(&self, x: &Tensor) -> Result<CompressedSample> {
        let first = x.data()[0];
        let (level, n) = if first < self.raw_below {
            return Ok(CompressedSample::raw_from_tensor(x));
        } else if first < self.deep_from {
            (1u8, self.level1_indices)
        } else {
            (2u8, self.level2_indices)
        };
        let v = (first * 255.0).round() as u32 % 16;
        let grid = IndexGrid::pack(&vec![v; n], 4)?;
        Ok(CompressedSample { level, payload: Payload::Indices(grid) })
    }
}

impl Compressor for MockCompressor {
    fn input_dims(&self) -> [usize; 3] {
        self.dims
    }

    fn compress_batch(&self, x: &Tensor, _d_th: f64) -> Result<Vec<CompressedSample>> {
        x.unstack().iter().map(|s| self.encode(s)).collect()
    }

    fn decode_samples(&self, samples: &[&CompressedSample]) -> Result<Vec<Tensor>> {
        samples
            .iter()
            .map(|s| {
                let first = match &s.payload {
                    Payload::Raw(b) => b[0] as f64 / 255.0,
                    Payload::Indices(g) => g.unpack()[0] as f64 / 255.0 + 0.3 * s.level as f64,
                };
                let v = (first + self.drift).rem_euclid(1.0);
                Ok(Tensor::from_fn(&self.dims, |i| if i == 0 { v } else { 0.5 }))
            })
            .collect()
    }
}

/// `(C, H, W)` image whose first pixel is `first`.
pub fn image(dims: [usize; 3], first: f64) -> Tensor {
    Tensor::from_fn(&dims, |i| if i == 0 { first } else { 0.25 })
}
