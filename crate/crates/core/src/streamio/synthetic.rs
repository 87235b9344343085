//! Procedural class-incremental image streams.

use std::collections::{HashSet, VecDeque};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::streamio::idx::Dataset;

fn d_tasks() -> usize {
    5
}
fn d_cpt() -> usize {
    2
}
fn d_spc() -> usize {
    500
}
fn d_test() -> usize {
    100
}
fn d_batch() -> usize {
    10
}
fn d_side() -> usize {
    8
}
fn d_one() -> usize {
    1
}
fn d_noise() -> f64 {
    0.05
}
fn d_jitter() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    #[serde(default = "d_tasks")]
    pub tasks: usize,
    #[serde(default = "d_cpt")]
    pub classes_per_task: usize,
    /// Explicit class ids per task; overrides `tasks` and `classes_per_task`.
    #[serde(default)]
    pub task_classes: Option<Vec<Vec<u16>>>,
    #[serde(default = "d_spc")]
    pub samples_per_class: usize,
    #[serde(default = "d_test")]
    pub test_per_class: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_one")]
    pub channels: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "d_noise")]
    pub noise: f64,
    /// Half-width in radians of per-sample phase jitter.
    #[serde(default = "d_jitter")]
    pub phase_jitter: f64,
    /// Half-width in radians of per-sample rotation jitter.
    #[serde(default)]
    pub angle_jitter: f64,
    /// Half-width of per-sample relative frequency jitter.
    #[serde(default)]
    pub freq_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl StreamSpec {
    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn class_sets(&self) -> Result<Vec<Vec<u16>>> {
        let sets = match &self.task_classes {
            Some(s) => s.clone(),
            None => (0..self.tasks)
                .map(|t| (0..self.classes_per_task).map(|c| (t * self.classes_per_task + c) as u16).collect())
                .collect(),
        };
        let mut seen = HashSet::new();
        for (t, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Config(format!("task {} has no classes", t + 1)));
            }
            for &c in set {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears in more than one task (task {})", t + 1)));
                }
            }
        }
        Ok(sets)
    }

    /// One more than the largest class id.
    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.class_sets()?.iter().flatten().map(|&c| c as usize + 1).max().unwrap_or(0))
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("stream batch size and image dims must be positive".into()));
        }
        if ![self.noise, self.phase_jitter, self.angle_jitter, self.freq_jitter].iter().all(|v| *v >= 0.0) {
            return Err(Error::Config("noise and jitter widths must be non-negative".into()));
        }
        if self.freq_jitter >= 1.0 {
            return Err(Error::Config("freq_jitter must be below 1".into()));
        }
        self.class_sets().map(|_| ())
    }
}

/// Noise-free class template at phase offset `phase`, values in `[0, 1]`.
pub fn class_pattern(class: u16, channels: usize, height: usize, width: usize, phase: f64) -> Vec<f64> {
    warped_pattern(class, channels, height, width, Warp { phase, ..Warp::default() })
}

/// Per-sample deviation from the class template.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub phase: f64,
    /// Added to the class orientation, radians.
    pub angle: f64,
    /// Multiplies the class frequency.
    pub freq_scale: f64,
}

impl Default for Warp {
    fn default() -> Self {
        Self { phase: 0.0, angle: 0.0, freq_scale: 1.0 }
    }
}

pub fn warped_pattern(class: u16, channels: usize, height: usize, width: usize, warp: Warp) -> Vec<f64> {
    let phase = warp.phase;
    let k = class as usize;
    let kind = k % 3;
    let freq = (1.0 + (k / 3) as f64 * 0.35) * warp.freq_scale;
    let angle = (k as f64) * 0.9 + warp.angle;
    let (ca, sa) = (angle.cos(), angle.sin());
    let base = 0.35 * (k % 4) as f64;
    let mut out = Vec::with_capacity(channels * height * width);
    for ch in 0..channels {
        let chp = ch as f64 * 0.5 * (k as f64 + 1.0);
        for y in 0..height {
            for x in 0..width {
                let u = x as f64 / width as f64;
                let v = y as f64 / height as f64;
                let proj = u * ca + v * sa;
                let val = match kind {
                    // Oriented stripes.
                    0 => 0.5 + 0.45 * (2.0 * PI * freq * proj + phase + chp).sin(),
                    // Checker texture.
                    1 => {
                        let a = (2.0 * PI * freq * u + phase + chp).sin();
                        let b = (2.0 * PI * freq * v + base).sin();
                        0.5 + 0.45 * a * b
                    }
                    // Soft gradient along the class direction.
                    _ => 0.5 + 0.45 * (PI * (proj - 0.5) * freq + phase * 0.5 + base + chp).sin(),
                };
                out.push(val);
            }
        }
    }
    out
}

fn draw(spec: &StreamSpec, class: u16, rng: &mut impl Rng, noise: &Normal<f64>) -> Tensor {
    let mut sym = |w: f64| if w > 0.0 { rng.gen_range(-w..=w) } else { 0.0 };
    let warp = Warp {
        phase: sym(spec.phase_jitter),
        angle: sym(spec.angle_jitter),
        freq_scale: 1.0 + sym(spec.freq_jitter),
    };
    let amp = rng.gen_range(0.85..=1.0);
    let mut px = warped_pattern(class, spec.channels, spec.height, spec.width, warp);
    for p in &mut px {
        let v = 0.5 + amp * (*p - 0.5) + noise.sample(rng);
        *p = crate::codes::to_byte(v) as f64 / 255.0;
    }
    Tensor::new(&spec.dims(), px).expect("pattern size")
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    /// 0-based task index.
    pub task: usize,
    /// Global batch index, strictly increasing across tasks.
    pub index: u32,
    /// `(N, C, H, W)`.
    pub images: Tensor,
    pub labels: Vec<u16>,
}

/// One-pass stream: batches are moved out and cannot be revisited.
#[derive(Debug)]
pub struct TaskStream {
    classes: Vec<Vec<u16>>,
    batches: VecDeque<StreamBatch>,
    task_batches: Vec<usize>,
    delivered: u32,
    test: Vec<Dataset>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.classes.len()
    }

    pub fn task_classes(&self) -> &[Vec<u16>] {
        &self.classes
    }

    /// Batches belonging to each task.
    pub fn task_batches(&self) -> &[usize] {
        &self.task_batches
    }

    pub fn remaining(&self) -> usize {
        self.batches.len()
    }

    pub fn delivered(&self) -> u32 {
        self.delivered
    }

    pub fn next_batch(&mut self) -> Option<StreamBatch> {
        let b = self.batches.pop_front()?;
        self.delivered += 1;
        Some(b)
    }

    /// Held-out samples per task, from an independent random stream.
    pub fn test_sets(&self) -> &[Dataset] {
        &self.test
    }
}

pub fn synthetic_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let classes = spec.class_sets()?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7E57_0000_0000_0001);
    let mut batches = VecDeque::new();
    let mut task_batches = Vec::new();
    let mut test = Vec::new();
    let mut index = 0u32;
    for (t, set) in classes.iter().enumerate() {
        let mut labels: Vec<u16> = set.iter().flat_map(|&c| std::iter::repeat_n(c, spec.samples_per_class)).collect();
        labels.shuffle(&mut rng);
        let mut count = 0;
        for chunk in labels.chunks(spec.batch_size) {
            let imgs: Vec<Tensor> = chunk.iter().map(|&c| draw(spec, c, &mut rng, &noise)).collect();
            batches.push_back(StreamBatch { task: t, index, images: Tensor::stack(&imgs)?, labels: chunk.to_vec() });
            index += 1;
            count += 1;
        }
        task_batches.push(count);
        let mut ds = Dataset { images: Vec::new(), labels: Vec::new() };
        for &c in set {
            for _ in 0..spec.test_per_class {
                ds.images.push(draw(spec, c, &mut test_rng, &noise));
                ds.labels.push(c);
            }
        }
        test.push(ds);
    }
    Ok(TaskStream { classes, batches, task_batches, delivered: 0, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamSpec {
        StreamSpec { samples_per_class: 20, test_per_class: 5, ..StreamSpec::default() }
    }

    #[test]
    fn deterministic_for_seed() {
        let mut a = synthetic_stream(&small()).unwrap();
        let mut b = synthetic_stream(&small()).unwrap();
        while let Some(x) = a.next_batch() {
            assert_eq!(Some(x), b.next_batch());
        }
        assert!(b.next_batch().is_none());
    }

    #[test]
    fn labels_respect_task_sets() {
        let mut s = synthetic_stream(&small()).unwrap();
        let classes = s.task_classes().to_vec();
        let mut all = HashSet::new();
        let mut last = None;
        while let Some(b) = s.next_batch() {
            assert!(last.is_none_or(|l| b.index > l));
            last = Some(b.index);
            for l in &b.labels {
                assert!(classes[b.task].contains(l));
                all.insert(*l);
            }
        }
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn overlapping_classes_rejected() {
        let spec = StreamSpec { task_classes: Some(vec![vec![0, 1], vec![1, 2]]), ..small() };
        assert!(synthetic_stream(&spec).is_err());
    }

    #[test]
    fn stream_is_consumed_once() {
        let mut s = synthetic_stream(&small()).unwrap();
        let n = s.remaining();
        for _ in 0..n {
            s.next_batch().unwrap();
        }
        assert!(s.next_batch().is_none());
        assert_eq!(s.delivered() as usize, n);
    }

    #[test]
    fn pixels_on_byte_grid() {
        let mut s = synthetic_stream(&small()).unwrap();
        let b = s.next_batch().unwrap();
        for &v in b.images.data() {
            assert_eq!(crate::codes::to_byte(v) as f64 / 255.0, v);
        }
    }
}
