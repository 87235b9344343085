//! Drift, reconstruction, point-cloud and continual-classification measurements.

mod probe;

pub use probe::{LinearProbe, ProbeConfig};

use crate::aqm::AqmStack;
use crate::autodiff::Tensor;
use crate::codes::CompressedSample;
use crate::error::{Error, Result};

/// Stored codes paired with the originals they came from. Originals are
/// measurement-only and never exposed mutably.
#[derive(Clone, Debug)]
pub struct DriftProbe {
    originals: Vec<Tensor>,
    codes: Vec<CompressedSample>,
    timestamp: u32,
    capture_error: f64,
}

impl DriftProbe {
    /// Stores every sample of `originals` (`(N, C, H, W)`) at `level` under the current stack.
    pub fn capture(stack: &AqmStack, originals: &Tensor, level: usize, timestamp: u32) -> Result<Self> {
        if level == 0 || level > stack.num_levels() {
            return Err(Error::Config(format!("probe level {level} not in 1..={}", stack.num_levels())));
        }
        let codes = stack.encode_all(originals)?;
        let m = stack.level(level);
        let per = m.indices_per_sample();
        let n = originals.shape()[0];
        let samples = (0..n)
            .map(|s| {
                let grid = crate::codes::IndexGrid::pack(codes[level - 1].sample_indices(s, per), m.index_bits())?;
                Ok(CompressedSample { level: level as u8, payload: crate::codes::Payload::Indices(grid) })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(stack, originals.unstack(), samples, timestamp)
    }

    pub fn from_samples(
        stack: &AqmStack,
        originals: Vec<Tensor>,
        codes: Vec<CompressedSample>,
        timestamp: u32,
    ) -> Result<Self> {
        if originals.len() != codes.len() || originals.is_empty() {
            return Err(Error::Invalid(format!("{} originals for {} codes", originals.len(), codes.len())));
        }
        let mut probe = Self { originals, codes, timestamp, capture_error: 0.0 };
        probe.capture_error = probe.drift(stack)?;
        Ok(probe)
    }

    pub fn originals(&self) -> &[Tensor] {
        &self.originals
    }

    pub fn codes(&self) -> &[CompressedSample] {
        &self.codes
    }

    pub fn timestamp(&self) -> u32 {
        self.timestamp
    }

    /// Reconstruction error at capture time.
    pub fn capture_error(&self) -> f64 {
        self.capture_error
    }

    /// Mean squared error between current decodings of the stored codes and the originals.
    pub fn drift(&self, stack: &AqmStack) -> Result<f64> {
        let refs: Vec<&CompressedSample> = self.codes.iter().collect();
        let recs = stack.decode_samples(&refs)?;
        let mut total = 0.0;
        for (r, x) in recs.iter().zip(&self.originals) {
            total += r.mse(x)?;
        }
        Ok(total / self.originals.len() as f64)
    }

    /// Stored index grids, for stability checks.
    pub fn index_grids(&self, stack: &AqmStack) -> Result<Vec<Vec<u32>>> {
        self.codes.iter().map(|c| stack.sample_indices(c)).collect()
    }
}

fn sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nn_sum(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter().map(|a| to.iter().map(|b| sq(a, b)).fold(f64::INFINITY, f64::min)).sum()
}

/// Symmetric nearest-neighbour RMSE between two point clouds, pooled over `|A| + |B|`.
pub fn snnrmse(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("snnrmse needs two non-empty clouds".into()));
    }
    // Sum the smaller-indexed direction first so swapping arguments is bit-identical.
    let (ab, ba) = (nn_sum(a, b), nn_sum(b, a));
    let (lo, hi) = if ab <= ba { (ab, ba) } else { (ba, ab) };
    Ok(((lo + hi) / (a.len() + b.len()) as f64).sqrt())
}

/// `R[i][j]`: accuracy on task `j` after finishing task `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccMatrix {
    rows: Vec<Option<Vec<f64>>>,
}

impl AccMatrix {
    pub fn new(tasks: usize) -> Self {
        Self { rows: vec![None; tasks] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let t = rows.len();
        let mut m = Self::new(t);
        for (i, r) in rows.into_iter().enumerate() {
            m.set_row(i, r)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set_row(&mut self, task: usize, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() || task >= self.rows.len() {
            return Err(Error::Shape(format!("row {task} of length {} for {} tasks", row.len(), self.rows.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows[task] = Some(row);
        Ok(())
    }

    pub fn row(&self, task: usize) -> Option<&[f64]> {
        self.rows.get(task)?.as_deref()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.is_some())
    }

    fn full(&self) -> Result<Vec<&[f64]>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.as_deref().ok_or_else(|| Error::Invalid(format!("row {i} not filled"))))
            .collect()
    }

    /// Mean final-row accuracy.
    pub fn accuracy(&self) -> Result<f64> {
        let rows = self.full()?;
        let last = rows.last().ok_or_else(|| Error::Invalid("empty matrix".into()))?;
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Mean over the first `T - 1` tasks of best-ever minus final accuracy.
    pub fn forgetting(&self) -> Result<f64> {
        let rows = self.full()?;
        let t = rows.len();
        if t < 2 {
            return Err(Error::Invalid("forgetting needs at least 2 tasks".into()));
        }
        let total: f64 = (0..t - 1)
            .map(|j| rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max) - rows[t - 1][j])
            .sum();
        Ok(total / (t - 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_offset_pair() {
        assert_eq!(snnrmse(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 1.0);
        assert_eq!(snnrmse(&[[2.0, 1.0, 0.5]; 4], &[[2.0, 1.0, 0.5]; 4]).unwrap(), 0.0);
        assert!(snnrmse(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn hand_matrix() {
        let r = AccMatrix::from_rows(vec![vec![0.9, 0.0], vec![0.6, 0.8]]).unwrap();
        assert!((r.accuracy().unwrap() - 0.7).abs() < 1e-12);
        assert!((r.forgetting().unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn constant_matrix() {
        let r = AccMatrix::from_rows(vec![vec![0.4; 3]; 3]).unwrap();
        assert!((r.accuracy().unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(r.forgetting().unwrap(), 0.0);
    }

    #[test]
    fn single_task_forgetting_rejected() {
        let r = AccMatrix::from_rows(vec![vec![0.5]]).unwrap();
        assert!(r.forgetting().is_err());
        assert!(AccMatrix::new(2).accuracy().is_err());
    }
}
