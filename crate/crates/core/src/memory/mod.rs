//! Byte-budgeted storage of compressed samples.
//!
//! The budget covers the compression model too: entries may use at most
//! `capacity - model_bytes` bytes after any public operation.

mod kde;

use kde::DensityEvictor;

pub use kde::{silverman_bandwidth, tv_to_uniform, TimestampKde};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aqm::AqmStack;
use crate::autodiff::Tensor;
use crate::codes::CompressedSample;
use crate::error::{Error, Result};

/// Per-entry metadata: level (1 byte), label (2 bytes), timestamp (4 bytes).
pub const ENTRY_METADATA_BYTES: usize = 7;
pub const NO_LABEL: u16 = u16::MAX;

/// Anything that can turn inputs into stored samples and back.
pub trait Compressor {
    fn input_dims(&self) -> [usize; 3];
    fn compress_batch(&self, x: &Tensor, d_th: f64) -> Result<Vec<CompressedSample>>;
    fn decode_samples(&self, samples: &[&CompressedSample]) -> Result<Vec<Tensor>>;
}

impl Compressor for AqmStack {
    fn input_dims(&self) -> [usize; 3] {
        AqmStack::input_dims(self)
    }

    fn compress_batch(&self, x: &Tensor, d_th: f64) -> Result<Vec<CompressedSample>> {
        AqmStack::compress_batch(self, x, d_th)
    }

    fn decode_samples(&self, samples: &[&CompressedSample]) -> Result<Vec<Tensor>> {
        AqmStack::decode_samples(self, samples)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StoredEntry {
    pub id: u64,
    /// Stream batch index at insertion.
    pub timestamp: u32,
    pub label: Option<u16>,
    pub sample: CompressedSample,
}

impl StoredEntry {
    pub fn byte_size(&self) -> usize {
        entry_bytes(&self.sample)
    }
}

pub fn entry_bytes(sample: &CompressedSample) -> usize {
    sample.payload_bytes() + ENTRY_METADATA_BYTES
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Bernoulli admission with random eviction.
    #[default]
    Reservoir,
    /// Admit everything; evict by timestamp density.
    Kde,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InsertReport {
    pub inserted: Option<u64>,
    pub level: Option<u8>,
    pub evicted: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateReport {
    /// Entries whose representation was re-derived.
    pub updated: Vec<u64>,
    /// Subset of `updated` that moved to a different level.
    pub level_changed: Vec<u64>,
    /// Re-derived representation did not fit; old one kept.
    pub kept_for_space: Vec<u64>,
    pub missing: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct ReplayItem {
    pub id: u64,
    pub x: Tensor,
    pub label: Option<u16>,
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    capacity: usize,
    model_bytes: usize,
    raw_entry_bytes: usize,
    entries: IndexMap<u64, StoredEntry>,
    used: usize,
    seen: u64,
    next_id: u64,
    policy: Policy,
}

impl MemoryBuffer {
    /// `raw_sample_bytes` is the level-0 payload size, used for the admission estimate.
    pub fn new(capacity: usize, model_bytes: usize, raw_sample_bytes: usize, policy: Policy) -> Result<Self> {
        if model_bytes >= capacity {
            return Err(Error::Capacity(format!(
                "model needs {model_bytes} bytes but capacity is {capacity}"
            )));
        }
        Ok(Self {
            capacity,
            model_bytes,
            raw_entry_bytes: raw_sample_bytes + ENTRY_METADATA_BYTES,
            entries: IndexMap::new(),
            used: 0,
            seen: 0,
            next_id: 0,
            policy,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn model_bytes(&self) -> usize {
        self.model_bytes
    }

    /// Bytes available to entries.
    pub fn budget(&self) -> usize {
        self.capacity - self.model_bytes
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn free(&self) -> usize {
        self.budget().saturating_sub(self.used)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
    }

    pub fn raw_entry_bytes(&self) -> usize {
        self.raw_entry_bytes
    }

    pub fn entries(&self) -> impl Iterator<Item = &StoredEntry> {
        self.entries.values()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, id: u64) -> Option<&StoredEntry> {
        self.entries.get(&id)
    }

    pub fn timestamps(&self) -> Vec<u32> {
        self.entries.values().map(|e| e.timestamp).collect()
    }

    /// Entry count per level `0..=levels`.
    pub fn level_counts(&self, levels: usize) -> Vec<usize> {
        let mut counts = vec![0; levels + 1];
        for e in self.entries.values() {
            if let Some(c) = counts.get_mut(e.sample.level as usize) {
                *c += 1;
            }
        }
        counts
    }

    /// Bytes used per level `0..=levels`.
    pub fn level_bytes(&self, levels: usize) -> Vec<usize> {
        let mut bytes = vec![0; levels + 1];
        for e in self.entries.values() {
            if let Some(b) = bytes.get_mut(e.sample.level as usize) {
                *b += e.byte_size();
            }
        }
        bytes
    }

    /// Restores the stream counter (checkpoint loading).
    pub(crate) fn set_seen(&mut self, seen: u64) {
        self.seen = seen;
    }

    /// Inserts a pre-built entry if it fits, assigning a fresh id.
    pub fn insert(&mut self, timestamp: u32, label: Option<u16>, sample: CompressedSample) -> Result<u64> {
        let size = entry_bytes(&sample);
        if size > self.free() {
            return Err(Error::Capacity(format!("entry of {size} bytes, {} free", self.free())));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.used += size;
        self.entries.insert(id, StoredEntry { id, timestamp, label, sample });
        Ok(id)
    }

    pub fn remove(&mut self, id: u64) -> Option<StoredEntry> {
        let e = self.entries.swap_remove(&id)?;
        self.used -= e.byte_size();
        Some(e)
    }

    fn remove_random(&mut self, rng: &mut impl Rng) -> Option<u64> {
        if self.entries.is_empty() {
            return None;
        }
        let i = rng.gen_range(0..self.entries.len());
        let id = *self.entries.get_index(i)?.0;
        self.remove(id);
        Some(id)
    }

    fn evictor(&self) -> DensityEvictor {
        DensityEvictor::new(self.entries.values().map(|e| (e.id, e.timestamp)))
    }

    fn admit(
        &mut self,
        sample: CompressedSample,
        label: Option<u16>,
        timestamp: u32,
        evictor: Option<&mut DensityEvictor>,
        rng: &mut impl Rng,
        report: &mut InsertReport,
    ) -> Result<()> {
        let size = entry_bytes(&sample);
        if size > self.budget() {
            return Err(Error::Capacity(format!(
                "sample of {size} bytes exceeds the {} bytes available after the model",
                self.budget()
            )));
        }
        let mut evictor = evictor;
        while size > self.free() {
            let evicted = match evictor.as_deref_mut() {
                None => self.remove_random(rng),
                Some(d) => d.evict(rng).inspect(|&id| {
                    self.remove(id);
                }),
            };
            match evicted {
                Some(id) => report.evicted.push(id),
                None => break,
            }
        }
        if size > self.free() {
            // Only entries from this call are left; the sample is dropped.
            return Ok(());
        }
        report.level = Some(sample.level);
        let id = self.insert(timestamp, label, sample)?;
        if let Some(d) = evictor {
            d.add_protected(id, timestamp);
        }
        report.inserted = Some(id);
        Ok(())
    }

    /// Admission probability for the next stream sample under the reservoir policy.
    fn admission_probability(&self) -> f64 {
        let n_reg = (self.budget() / self.raw_entry_bytes) as f64;
        let cap = n_reg.max(self.entries.len() as f64);
        (cap / self.seen.max(1) as f64).min(1.0)
    }

    /// Stream sampling for a single `(C, H, W)` input.
    pub fn add_to_memory(
        &mut self,
        x: &Tensor,
        label: Option<u16>,
        timestamp: u32,
        compressor: &impl Compressor,
        d_th: f64,
        rng: &mut impl Rng,
    ) -> Result<InsertReport> {
        let mut reports = self.add_batch(std::slice::from_ref(x), &[label], timestamp, compressor, d_th, rng)?;
        Ok(reports.pop().expect("one report"))
    }

    /// Stream sampling for a batch of inputs sharing one timestamp.
    pub fn add_batch(
        &mut self,
        xs: &[Tensor],
        labels: &[Option<u16>],
        timestamp: u32,
        compressor: &impl Compressor,
        d_th: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<InsertReport>> {
        if xs.len() != labels.len() {
            return Err(Error::Shape(format!("{} inputs with {} labels", xs.len(), labels.len())));
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        // The compressor is fixed for the whole call, so compressing up front gives the
        // same samples the per-item loop would.
        let batch = Tensor::stack(xs)?;
        let samples = compressor.compress_batch(&batch, d_th)?;
        if let Some(big) = samples.iter().map(entry_bytes).find(|&b| b > self.budget()) {
            return Err(Error::Capacity(format!(
                "sample of {big} bytes exceeds the {} bytes available after the model",
                self.budget()
            )));
        }
        let mut reports = Vec::with_capacity(xs.len());
        let mut evictor = (self.policy == Policy::Kde).then(|| self.evictor());
        for (sample, &label) in samples.into_iter().zip(labels) {
            self.seen += 1;
            let mut report = InsertReport::default();
            let add = match self.policy {
                Policy::Reservoir => rng.gen::<f64>() < self.admission_probability(),
                Policy::Kde => true,
            };
            if add {
                self.admit(sample, label, timestamp, evictor.as_mut(), rng, &mut report)?;
            }
            reports.push(report);
        }
        Ok(reports)
    }

    /// Draws `n` stored entries uniformly with replacement.
    pub fn sample_ids(&self, n: usize, rng: &mut impl Rng) -> Vec<u64> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| *self.entries.get_index(rng.gen_range(0..self.entries.len())).expect("index").0)
            .collect()
    }

    /// Replay batch: uniformly drawn entries decoded to input space.
    pub fn sample_replay(&self, n: usize, compressor: &impl Compressor, rng: &mut impl Rng) -> Result<Vec<ReplayItem>> {
        let ids = self.sample_ids(n, rng);
        self.decode_ids(&ids, compressor)
    }

    pub fn decode_ids(&self, ids: &[u64], compressor: &impl Compressor) -> Result<Vec<ReplayItem>> {
        let entries: Vec<&StoredEntry> = ids
            .iter()
            .map(|id| self.entries.get(id).ok_or_else(|| Error::Invalid(format!("no entry {id}"))))
            .collect::<Result<_>>()?;
        let samples: Vec<&CompressedSample> = entries.iter().map(|e| &e.sample).collect();
        let xs = compressor.decode_samples(&samples)?;
        Ok(entries.iter().zip(xs).map(|(e, x)| ReplayItem { id: e.id, x, label: e.label }).collect())
    }

    /// Re-derives the representation of each listed entry from its current
    /// reconstruction. Old bytes are released before the new ones are claimed; a
    /// new representation that does not fit leaves the entry untouched.
    pub fn update_buffer_rep(&mut self, ids: &[u64], compressor: &impl Compressor, d_th: f64) -> Result<UpdateReport> {
        let mut report = UpdateReport::default();
        let mut seen = std::collections::HashSet::new();
        let mut present = Vec::new();
        for &id in ids {
            if !seen.insert(id) {
                continue;
            }
            if self.entries.contains_key(&id) {
                present.push(id);
            } else {
                report.missing.push(id);
            }
        }
        if present.is_empty() {
            return Ok(report);
        }
        let recs = self.decode_ids(&present, compressor)?;
        let xs: Vec<Tensor> = recs.into_iter().map(|r| r.x).collect();
        let fresh = compressor.compress_batch(&Tensor::stack(&xs)?, d_th)?;
        for (id, sample) in present.into_iter().zip(fresh) {
            let entry = &self.entries[&id];
            let old_size = entry.byte_size();
            let new_size = entry_bytes(&sample);
            if new_size > self.free() + old_size {
                report.kept_for_space.push(id);
                continue;
            }
            let old_level = entry.sample.level;
            let e = self.entries.get_mut(&id).expect("present");
            e.sample = sample;
            self.used = self.used - old_size + new_size;
            if e.sample.level != old_level {
                report.level_changed.push(id);
            }
            report.updated.push(id);
        }
        Ok(report)
    }

    /// Iterative density-driven removal: `iterations` rounds, each refitting the
    /// timestamp density and removing `removals_per_iteration` entries from the most
    /// crowded timestamps. At least one entry is always kept. Returns the removed ids.
    pub fn kde_rebalance(&mut self, iterations: usize, removals_per_iteration: usize, rng: &mut impl Rng) -> Vec<u64> {
        let mut removed = Vec::new();
        if self.entries.len() <= 1 {
            if self.used > self.budget() {
                removed.extend(self.remove_random(rng));
            }
            return removed;
        }
        for _ in 0..iterations {
            if self.entries.len() <= 1 {
                break;
            }
            let mut d = self.evictor();
            for _ in 0..removals_per_iteration.min(self.entries.len() - 1) {
                let Some(id) = d.evict(rng) else { break };
                self.remove(id);
                removed.push(id);
            }
        }
        removed
    }

    /// Density-driven eviction until the buffer fits its budget.
    pub fn rebalance_to_budget(&mut self, rng: &mut impl Rng) -> Vec<u64> {
        let mut removed = Vec::new();
        let mut d = self.evictor();
        while self.used > self.budget() {
            match d.evict(rng) {
                Some(id) => {
                    self.remove(id);
                    removed.push(id);
                }
                None => break,
            }
        }
        removed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::{IndexGrid, Payload};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Stores everything raw.
    struct Raw([usize; 3]);

    impl Compressor for Raw {
        fn input_dims(&self) -> [usize; 3] {
            self.0
        }
        fn compress_batch(&self, x: &Tensor, _d_th: f64) -> Result<Vec<CompressedSample>> {
            Ok(x.unstack().iter().map(CompressedSample::raw_from_tensor).collect())
        }
        fn decode_samples(&self, samples: &[&CompressedSample]) -> Result<Vec<Tensor>> {
            samples
                .iter()
                .map(|s| crate::codes::from_bytes(&self.0, s.payload_data()))
                .collect()
        }
    }

    fn img(v: f64) -> Tensor {
        Tensor::full(&[1, 4, 4], v)
    }

    #[test]
    fn first_sample_always_stored() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = MemoryBuffer::new(1000, 100, 16, Policy::Reservoir).unwrap();
        let r = m.add_to_memory(&img(0.5), Some(1), 0, &Raw([1, 4, 4]), 0.0, &mut rng).unwrap();
        assert!(r.inserted.is_some());
        assert_eq!(m.seen(), 1);
        assert_eq!(m.used(), 16 + ENTRY_METADATA_BYTES);
    }

    #[test]
    fn oversized_sample_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = MemoryBuffer::new(120, 100, 16, Policy::Reservoir).unwrap();
        let err = m.add_to_memory(&img(0.5), None, 0, &Raw([1, 4, 4]), 0.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn overflow_triggers_random_deletion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // 200 bytes of budget, filled with 8 small entries of 25 bytes each.
        let mut m = MemoryBuffer::new(300, 100, 224 - ENTRY_METADATA_BYTES, Policy::Kde).unwrap();
        for t in 0..8 {
            let s = CompressedSample { level: 1, payload: Payload::Indices(IndexGrid::pack(&[0; 36], 4).unwrap()) };
            m.insert(t, None, s).unwrap();
        }
        assert_eq!(m.free(), 0);
        let big = CompressedSample { level: 0, payload: Payload::Raw(vec![7; 224 - ENTRY_METADATA_BYTES]) };
        let mut report = InsertReport::default();
        // 224-byte entry with 200 budget would never fit: rejected.
        assert!(m.admit(big, None, 9, None, &mut rng, &mut report).is_err());
        let mid = CompressedSample { level: 0, payload: Payload::Raw(vec![7; 60]) };
        let mut report = InsertReport::default();
        m.admit(mid, None, 9, None, &mut rng, &mut report).unwrap();
        assert!(!report.evicted.is_empty());
        assert!(m.used() <= m.budget());
    }

    #[test]
    fn deletion_returns_exact_bytes() {
        let mut m = MemoryBuffer::new(1000, 10, 16, Policy::Reservoir).unwrap();
        let a = m.insert(0, Some(3), CompressedSample::raw_from_tensor(&img(0.1))).unwrap();
        let before = m.free();
        let e = m.remove(a).unwrap();
        assert_eq!(m.free(), before + e.byte_size());
        assert_eq!(m.used(), 0);
    }

    #[test]
    fn replay_of_single_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = MemoryBuffer::new(1000, 10, 16, Policy::Reservoir).unwrap();
        let raw = CompressedSample::raw_from_tensor(&img(0.4));
        let id = m.insert(0, Some(3), raw.clone()).unwrap();
        let batch = m.sample_replay(5, &Raw([1, 4, 4]), &mut rng).unwrap();
        assert_eq!(batch.len(), 5);
        for item in batch {
            assert_eq!(item.id, id);
            assert_eq!(crate::codes::to_bytes(&item.x), raw.payload_data());
        }
    }

    #[test]
    fn empty_buffer_replays_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MemoryBuffer::new(1000, 10, 16, Policy::Reservoir).unwrap();
        assert!(m.sample_replay(4, &Raw([1, 4, 4]), &mut rng).unwrap().is_empty());
    }

    #[test]
    fn missing_ids_are_reported() {
        let mut m = MemoryBuffer::new(1000, 10, 16, Policy::Reservoir).unwrap();
        let id = m.insert(0, None, CompressedSample::raw_from_tensor(&img(0.2))).unwrap();
        let r = m.update_buffer_rep(&[id, 99], &Raw([1, 4, 4]), 0.1).unwrap();
        assert_eq!(r.missing, vec![99]);
        assert_eq!(r.updated, vec![id]);
    }

    #[test]
    fn single_entry_rebalance_is_noop_within_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = MemoryBuffer::new(1000, 10, 16, Policy::Kde).unwrap();
        m.insert(5, None, CompressedSample::raw_from_tensor(&img(0.2))).unwrap();
        assert!(m.kde_rebalance(10, 5, &mut rng).is_empty());
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn kde_batch_larger_than_budget_keeps_what_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Two 23-byte entries fit in 50 bytes; the rest of the batch is dropped.
        let mut m = MemoryBuffer::new(60, 10, 16, Policy::Kde).unwrap();
        m.insert(0, None, CompressedSample::raw_from_tensor(&img(0.1))).unwrap();
        let xs: Vec<Tensor> = (0..5).map(|i| img(i as f64 / 5.0)).collect();
        let r = m.add_batch(&xs, &[None; 5], 1, &Raw([1, 4, 4]), 0.0, &mut rng).unwrap();
        assert_eq!(r.iter().filter(|r| r.inserted.is_some()).count(), 2);
        assert!(m.timestamps().iter().all(|&t| t == 1));
        assert_eq!(m.seen(), 5);
        assert!(m.used() <= m.budget());
    }
}
