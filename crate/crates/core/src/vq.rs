//! Nearest-neighbour vector quantization with an EMA-maintained codebook.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.6;
pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;
const INIT_JITTER: f64 = 0.01;

/// Embedding table `E` (K rows of length D) plus its moving-average statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    decay: f64,
    laplace_eps: f64,
    embeddings: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    frozen: bool,
    initialized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    /// Same shape as the quantized input.
    pub z_q: Tensor,
    /// One index per site, in site order.
    pub indices: Vec<u32>,
    /// Sum of squared residuals over all sites.
    pub residual_sq: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaOutcome {
    Applied,
    SkippedFrozen,
}

impl Codebook {
    /// Codebook with standard-normal rows. Rows are replaced by data on the first
    /// call to [`Codebook::init_from_samples`].
    pub fn new(size: usize, dim: usize, decay: f64, laplace_eps: f64, rng: &mut impl Rng) -> Result<Self> {
        validate(size, dim, decay, laplace_eps)?;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let embeddings: Vec<f64> = (0..size * dim).map(|_| normal.sample(rng) as f32 as f64).collect();
        Ok(Self {
            size,
            dim,
            decay,
            laplace_eps,
            ema_sums: embeddings.clone(),
            embeddings,
            ema_counts: vec![1.0; size],
            frozen: false,
            initialized: false,
        })
    }

    /// Codebook with explicit rows, treated as already initialized.
    pub fn from_embeddings(size: usize, dim: usize, embeddings: Vec<f64>, decay: f64, laplace_eps: f64) -> Result<Self> {
        validate(size, dim, decay, laplace_eps)?;
        if embeddings.len() != size * dim {
            return Err(Error::Shape(format!(
                "codebook {size}x{dim} needs {} values, got {}",
                size * dim,
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook embedding".into()));
        }
        Ok(Self {
            size,
            dim,
            decay,
            laplace_eps,
            ema_sums: embeddings.clone(),
            embeddings,
            ema_counts: vec![1.0; size],
            frozen: false,
            initialized: true,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn laplace_eps(&self) -> f64 {
        self.laplace_eps
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Bits needed per stored index: `ceil(log2 K)`.
    pub fn index_bits(&self) -> u32 {
        index_bits(self.size)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Marks the codebook as carrying data-derived rows (used after loading).
    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Seeds rows from randomly chosen input vectors plus small Gaussian jitter.
    /// No-op once initialized or frozen.
    pub fn init_from_samples(&mut self, vectors: &[f64], rng: &mut impl Rng) {
        if self.initialized || self.frozen || vectors.len() < self.dim {
            return;
        }
        let sites = vectors.len() / self.dim;
        let jitter = Normal::new(0.0, INIT_JITTER).expect("jitter");
        for k in 0..self.size {
            let s = rng.gen_range(0..sites);
            for d in 0..self.dim {
                let v = vectors[s * self.dim + d] + jitter.sample(rng);
                self.embeddings[k * self.dim + d] = v as f32 as f64;
            }
        }
        self.ema_sums.copy_from_slice(&self.embeddings);
        self.ema_counts.iter_mut().for_each(|c| *c = 1.0);
        self.initialized = true;
    }

    /// Index of the nearest row; ties go to the smallest index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for k in 0..self.size {
            let d = sq_dist(v, self.row(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Nearest and second-nearest Euclidean distances (not squared).
    pub fn two_nearest(&self, v: &[f64]) -> (usize, f64, f64) {
        let (mut i1, mut d1, mut d2) = (0usize, f64::INFINITY, f64::INFINITY);
        for k in 0..self.size {
            let d = sq_dist(v, self.row(k));
            if d < d1 {
                d2 = d1;
                d1 = d;
                i1 = k;
            } else if d < d2 {
                d2 = d;
            }
        }
        (i1, d1.sqrt(), d2.sqrt())
    }

    /// Quantizes every length-D vector along the last axis of `z_e`.
    pub fn quantize(&self, z_e: &Tensor) -> Result<QuantizeResult> {
        let last = z_e.shape().last().copied().unwrap_or(0);
        if last != self.dim {
            return Err(Error::Shape(format!(
                "quantize: input {:?} last dim must equal codebook dim {}",
                z_e.shape(),
                self.dim
            )));
        }
        let (indices, z_q, residual_sq) = self.quantize_flat(z_e.data())?;
        Ok(QuantizeResult { z_q: Tensor::new(z_e.shape(), z_q)?, indices, residual_sq })
    }

    /// Quantizes a flat run of D-vectors.
    pub fn quantize_flat(&self, vectors: &[f64]) -> Result<(Vec<u32>, Vec<f64>, f64)> {
        if !vectors.len().is_multiple_of(self.dim) {
            return Err(Error::Shape(format!(
                "{} values are not a whole number of {}-vectors",
                vectors.len(),
                self.dim
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output fed to quantize".into()));
        }
        let sites = vectors.len() / self.dim;
        let mut indices = Vec::with_capacity(sites);
        let mut z_q = Vec::with_capacity(vectors.len());
        let mut residual = 0.0;
        for s in 0..sites {
            let v = &vectors[s * self.dim..(s + 1) * self.dim];
            let (k, d) = self.nearest(v);
            indices.push(k as u32);
            z_q.extend_from_slice(self.row(k));
            residual += d;
        }
        Ok((indices, z_q, residual))
    }

    /// Row lookup for stored indices.
    pub fn embed(&self, indices: &[u32]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i as usize >= self.size {
                return Err(Error::CorruptPayload(format!("index {i} >= codebook size {}", self.size)));
            }
            out.extend_from_slice(self.row(i as usize));
        }
        Ok(out)
    }

    /// Moving-average codebook update from assigned encoder outputs.
    ///
    /// `N_k <- g N_k + (1-g) count_k`, `m_k <- g m_k + (1-g) sum_k`,
    /// `E_k <- m_k / N~_k` with Laplace-smoothed `N~_k = (N_k + eps) / (n + K eps) * n`
    /// and `n = sum_j N_j`.
    pub fn ema_update(&mut self, vectors: &[f64], indices: &[u32]) -> Result<EmaOutcome> {
        if self.frozen {
            return Ok(EmaOutcome::SkippedFrozen);
        }
        if vectors.len() != indices.len() * self.dim {
            return Err(Error::Shape(format!(
                "ema_update: {} values for {} indices of dim {}",
                vectors.len(),
                indices.len(),
                self.dim
            )));
        }
        let mut counts = vec![0.0; self.size];
        let mut sums = vec![0.0; self.size * self.dim];
        for (s, &k) in indices.iter().enumerate() {
            let k = k as usize;
            if k >= self.size {
                return Err(Error::CorruptPayload(format!("index {k} >= codebook size {}", self.size)));
            }
            counts[k] += 1.0;
            for d in 0..self.dim {
                sums[k * self.dim + d] += vectors[s * self.dim + d];
            }
        }
        let g = self.decay;
        for k in 0..self.size {
            self.ema_counts[k] = g * self.ema_counts[k] + (1.0 - g) * counts[k];
        }
        for i in 0..self.size * self.dim {
            self.ema_sums[i] = g * self.ema_sums[i] + (1.0 - g) * sums[i];
        }
        let n: f64 = self.ema_counts.iter().sum();
        let denom = n + self.size as f64 * self.laplace_eps;
        for k in 0..self.size {
            let smoothed = (self.ema_counts[k] + self.laplace_eps) / denom * n;
            for d in 0..self.dim {
                self.embeddings[k * self.dim + d] = self.ema_sums[k * self.dim + d] / smoothed;
            }
        }
        Ok(EmaOutcome::Applied)
    }

    /// Rounds rows to `f32` precision, the storage format.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.embeddings {
            *v = *v as f32 as f64;
        }
    }

    /// Resets moving-average state to match the current rows (after loading).
    pub(crate) fn reset_ema_state(&mut self) {
        self.ema_counts.iter_mut().for_each(|c| *c = 1.0);
        self.ema_sums.copy_from_slice(&self.embeddings);
    }

    pub(crate) fn set_embeddings(&mut self, rows: Vec<f64>) {
        debug_assert_eq!(rows.len(), self.embeddings.len());
        self.embeddings = rows;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

fn validate(size: usize, dim: usize, decay: f64, laplace_eps: f64) -> Result<()> {
    if size < 2 {
        return Err(Error::Config(format!("codebook needs K >= 2, got {size}")));
    }
    if dim == 0 {
        return Err(Error::Config("codebook dimension must be positive".into()));
    }
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {decay}")));
    }
    if !(laplace_eps > 0.0) {
        return Err(Error::Config(format!("Laplace epsilon must be positive, got {laplace_eps}")));
    }
    Ok(())
}

pub fn index_bits(size: usize) -> u32 {
    let mut bits = 0u32;
    while (1usize << bits) < size {
        bits += 1;
    }
    bits
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn brute_argmin(cb: &Codebook, v: &[f64]) -> usize {
        let dists: Vec<f64> = (0..cb.size()).map(|k| sq_dist(v, cb.row(k))).collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&d| d == min).unwrap()
    }

    #[test]
    fn exact_row_gets_its_index() {
        let mut r = rng(1);
        let cb = Codebook::new(8, 3, 0.6, 1e-5, &mut r).unwrap();
        let z = Tensor::new(&[1, 1, 3], cb.row(3).to_vec()).unwrap();
        let q = cb.quantize(&z).unwrap();
        assert_eq!(q.indices, vec![3]);
        assert_eq!(q.residual_sq, 0.0);
    }

    #[test]
    fn matches_exhaustive_argmin() {
        let mut r = rng(2);
        let cb = Codebook::new(4, 5, 0.6, 1e-5, &mut r).unwrap();
        for _ in 0..50 {
            let z = Tensor::from_fn(&[2, 2, 5], |_| r.gen_range(-2.0..2.0));
            let q = cb.quantize(&z).unwrap();
            for s in 0..4 {
                let v = &z.data()[s * 5..(s + 1) * 5];
                assert_eq!(q.indices[s] as usize, brute_argmin(&cb, v));
                assert_eq!(&q.z_q.data()[s * 5..(s + 1) * 5], cb.row(q.indices[s] as usize));
            }
        }
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let cb = Codebook::from_embeddings(3, 1, vec![1.0, -1.0, 1.0], 0.6, 1e-5).unwrap();
        let (k, _) = cb.nearest(&[0.0]);
        assert_eq!(k, 0);
        let (k, _) = cb.nearest(&[1.0]);
        assert_eq!(k, 0);
    }

    #[test]
    fn wrong_dim_and_non_finite_rejected() {
        let cb = Codebook::new(4, 3, 0.6, 1e-5, &mut rng(3)).unwrap();
        assert!(cb.quantize(&Tensor::zeros(&[2, 4])).is_err());
        let bad = Tensor::new(&[1, 3], vec![0.0, f64::NAN, 1.0]).unwrap();
        assert!(matches!(cb.quantize(&bad), Err(Error::NonFinite(_))));
        assert!(Codebook::new(1, 3, 0.6, 1e-5, &mut rng(3)).is_err());
    }

    #[test]
    fn cifar_latent_gives_one_index_per_site() {
        let cb = Codebook::new(128, 100, 0.6, 1e-5, &mut rng(4)).unwrap();
        let z = Tensor::from_fn(&[16, 16, 100], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let q = cb.quantize(&z).unwrap();
        assert_eq!(q.indices.len(), 16 * 16);
        assert_eq!(cb.index_bits(), 7);
    }

    #[test]
    fn hand_accumulation_two_sites() {
        let mut cb = Codebook::from_embeddings(2, 2, vec![0.0, 0.0, 5.0, 5.0], 0.6, 1e-5).unwrap();
        let z = [0.2, 0.4, -0.1, 0.3];
        cb.ema_update(&z, &[0, 0]).unwrap();
        let counts = cb.ema_counts();
        assert!((counts[0] - (0.6 * 1.0 + 0.4 * 2.0)).abs() < 1e-15);
        assert!((counts[1] - 0.6).abs() < 1e-15);
        let sums = cb.ema_sums();
        assert!((sums[0] - 0.4 * (0.2 - 0.1)).abs() < 1e-15);
        assert!((sums[1] - 0.4 * (0.4 + 0.3)).abs() < 1e-15);
        // untouched row decays
        assert!((sums[2] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_assignment_decays_and_smoothing_moves_row() {
        let mut cb = Codebook::from_embeddings(2, 1, vec![0.0, 4.0], 0.6, 1e-5).unwrap();
        cb.ema_update(&[0.1], &[0]).unwrap();
        assert!((cb.ema_counts()[1] - 0.6).abs() < 1e-15);
        assert!((cb.ema_sums()[1] - 2.4).abs() < 1e-15);
        // E_1 = m_1 / N~_1, where N~_1 differs from N_1 only by smoothing
        let e1 = cb.row(1)[0];
        assert!((e1 - 4.0).abs() < 1e-3 && e1 != 4.0);
    }

    #[test]
    fn frozen_is_immutable() {
        let mut r = rng(5);
        let mut cb = Codebook::new(4, 2, 0.6, 1e-5, &mut r).unwrap();
        cb.freeze();
        let before = cb.clone();
        for _ in 0..1000 {
            let z: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
            assert_eq!(cb.ema_update(&z, &[0, 1, 3]).unwrap(), EmaOutcome::SkippedFrozen);
            cb.init_from_samples(&z, &mut r);
        }
        assert_eq!(cb, before);
    }

    #[test]
    fn freeze_keeps_quantization() {
        let mut r = rng(6);
        let mut cb = Codebook::new(6, 3, 0.6, 1e-5, &mut r).unwrap();
        let z = Tensor::from_fn(&[5, 3], |_| r.gen_range(-1.0..1.0));
        let q0 = cb.quantize(&z).unwrap();
        cb.freeze();
        assert_eq!(cb.quantize(&z).unwrap(), q0);
    }

    #[test]
    fn index_bit_widths() {
        assert_eq!(index_bits(2), 1);
        assert_eq!(index_bits(16), 4);
        assert_eq!(index_bits(17), 5);
        assert_eq!(index_bits(128), 7);
        assert_eq!(index_bits(256), 8);
    }
}
