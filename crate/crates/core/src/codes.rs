//! Stored representations: raw bytes or bit-packed codebook indices.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Codebook indices packed at a fixed bit width, LSB-first, padded to a byte boundary.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexGrid {
    bits: u8,
    len: usize,
    bytes: Vec<u8>,
}

impl IndexGrid {
    pub fn pack(indices: &[u32], bits: u32) -> Result<Self> {
        if bits == 0 || bits > 32 {
            return Err(Error::Invalid(format!("unsupported index width {bits}")));
        }
        let total = indices.len() * bits as usize;
        let mut bytes = vec![0u8; total.div_ceil(8)];
        let mut pos = 0usize;
        for &ix in indices {
            if bits < 32 && ix >> bits != 0 {
                return Err(Error::Invalid(format!("index {ix} does not fit in {bits} bits")));
            }
            for b in 0..bits as usize {
                if (ix >> b) & 1 == 1 {
                    bytes[(pos + b) / 8] |= 1 << ((pos + b) % 8);
                }
            }
            pos += bits as usize;
        }
        Ok(Self { bits: bits as u8, len: indices.len(), bytes })
    }

    /// Rebuilds a grid from stored bytes; the byte count must match exactly.
    pub fn from_bytes(bytes: Vec<u8>, bits: u32, len: usize) -> Result<Self> {
        let want = (len * bits as usize).div_ceil(8);
        if bytes.len() != want || bits == 0 || bits > 32 {
            return Err(Error::CorruptPayload(format!(
                "{len} indices at {bits} bits need {want} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(Self { bits: bits as u8, len, bytes })
    }

    pub fn unpack(&self) -> Vec<u32> {
        let bits = self.bits as usize;
        (0..self.len)
            .map(|i| {
                let mut v = 0u32;
                for b in 0..bits {
                    let p = i * bits + b;
                    if (self.bytes[p / 8] >> (p % 8)) & 1 == 1 {
                        v |= 1 << b;
                    }
                }
                v
            })
            .collect()
    }

    pub fn bits(&self) -> u32 {
        self.bits as u32
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_len(&self) -> usize {
        self.len * self.bits as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Payload {
    /// One byte per channel value.
    Raw(Vec<u8>),
    Indices(IndexGrid),
}

/// A sample as chosen for storage: level 0 is the raw input, level `i` the indices of module `i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CompressedSample {
    pub level: u8,
    pub payload: Payload,
}

impl CompressedSample {
    pub fn raw_from_tensor(x: &Tensor) -> Self {
        Self { level: 0, payload: Payload::Raw(to_bytes(x)) }
    }

    pub fn payload_bytes(&self) -> usize {
        match &self.payload {
            Payload::Raw(b) => b.len(),
            Payload::Indices(g) => g.bytes().len(),
        }
    }

    pub fn payload_data(&self) -> &[u8] {
        match &self.payload {
            Payload::Raw(b) => b,
            Payload::Indices(g) => g.bytes(),
        }
    }
}

/// Pixel value in `[0, 1]` to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_bytes(x: &Tensor) -> Vec<u8> {
    x.data().iter().map(|&v| to_byte(v)).collect()
}

pub fn from_bytes(shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
    Tensor::new(shape, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(bits in 1u32..=12, raw in proptest::collection::vec(any::<u32>(), 0..80)) {
            let mask = (1u32 << bits) - 1;
            let idx: Vec<u32> = raw.iter().map(|v| v & mask).collect();
            let grid = IndexGrid::pack(&idx, bits).unwrap();
            prop_assert_eq!(grid.bytes().len(), (idx.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(grid.unpack(), idx);
        }
    }

    #[test]
    fn cifar_grid_size() {
        let idx = vec![127u32; 256];
        let g = IndexGrid::pack(&idx, 7).unwrap();
        assert_eq!(g.bit_len(), 256 * 7);
        assert_eq!(g.bytes().len(), 224);
    }

    #[test]
    fn oversized_index_rejected() {
        assert!(IndexGrid::pack(&[16], 4).is_err());
        assert!(IndexGrid::from_bytes(vec![0; 3], 4, 8).is_err());
    }

    #[test]
    fn byte_conversion_is_exact_on_grid_values() {
        let bytes: Vec<u8> = (0..=255).collect();
        let t = from_bytes(&[256], &bytes).unwrap();
        assert_eq!(to_bytes(&t), bytes);
    }
}
