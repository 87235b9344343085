use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian kernel density over stored timestamps.
#[derive(Clone, Debug)]
pub struct TimestampKde {
    points: Vec<f64>,
    bandwidth: f64,
}

/// Silverman's rule: `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`; falls back to the
/// non-zero spread measure, then to 1.
pub fn silverman_bandwidth(points: &[f64]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 1.0;
    }
    let mean = points.iter().sum::<f64>() / n as f64;
    let sd = (points.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = points.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => return 1.0,
    };
    0.9 * spread * (n as f64).powf(-0.2)
}

impl TimestampKde {
    pub fn fit(points: Vec<f64>) -> Self {
        let bandwidth = silverman_bandwidth(&points);
        Self { points, bandwidth }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density(&self, t: f64) -> f64 {
        let h = self.bandwidth;
        let norm = (2.0 * std::f64::consts::PI).sqrt() * h * self.points.len() as f64;
        self.points.iter().map(|p| (-0.5 * ((t - p) / h).powi(2)).exp()).sum::<f64>() / norm
    }

    /// Draws one point from the density.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let c = self.points[rng.gen_range(0..self.points.len())];
        let z: f64 = StandardNormal.sample(rng);
        c + self.bandwidth * z
    }
}

/// Density-weighted eviction over stored timestamps.
///
/// Entries sharing a timestamp form one group; eviction always takes from the
/// group where the kernel density is highest, so crowded stretches of the stream
/// lose entries first and sparse ones are left alone. The bandwidth is fixed at construction; densities are
/// kept exact as entries are added or removed.
#[derive(Clone, Debug)]
pub(crate) struct DensityEvictor {
    ts: Vec<f64>,
    ids: Vec<Vec<u64>>,
    protected: Vec<Vec<u64>>,
    // Unnormalised: sum of kernels over every tracked entry.
    dens: Vec<f64>,
    bandwidth: f64,
}

impl DensityEvictor {
    pub(crate) fn new(points: impl IntoIterator<Item = (u64, u32)>) -> Self {
        let mut groups: std::collections::BTreeMap<u32, Vec<u64>> = Default::default();
        for (id, t) in points {
            groups.entry(t).or_default().push(id);
        }
        let all: Vec<f64> = groups.iter().flat_map(|(t, v)| std::iter::repeat_n(*t as f64, v.len())).collect();
        let bandwidth = silverman_bandwidth(&all);
        let ts: Vec<f64> = groups.keys().map(|&t| t as f64).collect();
        let ids: Vec<Vec<u64>> = groups.into_values().collect();
        let mut e = Self { protected: vec![Vec::new(); ts.len()], dens: vec![0.0; ts.len()], ts, ids, bandwidth };
        for i in 0..e.ts.len() {
            let (t, n) = (e.ts[i], e.ids[i].len() as f64);
            e.shift(t, n);
        }
        e
    }

    fn kernel(&self, d: f64) -> f64 {
        let z = d / self.bandwidth;
        if z.abs() > 8.0 {
            0.0
        } else {
            (-0.5 * z * z).exp()
        }
    }

    fn shift(&mut self, t: f64, weight: f64) {
        for k in 0..self.ts.len() {
            self.dens[k] += weight * self.kernel(self.ts[k] - t);
        }
    }

    fn group(&mut self, t: u32) -> usize {
        let t = t as f64;
        match self.ts.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => i,
            Err(i) => {
                self.ts.insert(i, t);
                self.ids.insert(i, Vec::new());
                self.protected.insert(i, Vec::new());
                let d = (0..self.ts.len()).filter(|&k| k != i).map(|k| {
                    let n = (self.ids[k].len() + self.protected[k].len()) as f64;
                    n * self.kernel(self.ts[k] - t)
                });
                let d = d.sum();
                self.dens.insert(i, d);
                i
            }
        }
    }

    /// Tracks a new entry that can never be drawn.
    pub(crate) fn add_protected(&mut self, id: u64, t: u32) {
        let i = self.group(t);
        self.protected[i].push(id);
        self.shift(t as f64, 1.0);
    }

    /// Forgets one unprotected entry from the densest timestamp, ties broken
    /// uniformly; `None` if there is none.
    pub(crate) fn evict(&mut self, rng: &mut impl Rng) -> Option<u64> {
        let best = (0..self.ts.len())
            .filter(|&k| !self.ids[k].is_empty())
            .map(|k| self.dens[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..self.ts.len())
            .filter(|&k| !self.ids[k].is_empty() && self.dens[k] >= best * (1.0 - 1e-12))
            .collect();
        let g = *tied.get(rng.gen_range(0..tied.len().max(1)))?;
        let j = rng.gen_range(0..self.ids[g].len());
        let id = self.ids[g].swap_remove(j);
        self.shift(self.ts[g], -1.0);
        Some(id)
    }
}

/// Total-variation distance between the histogram of `timestamps` over
/// `bins` equal bins of `[start, end)` and the uniform distribution.
pub fn tv_to_uniform(timestamps: &[u32], start: u32, end: u32, bins: usize) -> f64 {
    if timestamps.is_empty() || bins == 0 || end <= start {
        return 1.0;
    }
    let width = (end - start) as f64 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &t in timestamps {
        let b = (((t.clamp(start, end - 1) - start) as f64) / width) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = timestamps.len() as f64;
    0.5 * counts.iter().map(|&c| (c as f64 / n - 1.0 / bins as f64).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bandwidth_of_constant_points_is_positive() {
        assert_eq!(silverman_bandwidth(&[3.0; 10]), 1.0);
    }

    #[test]
    fn bandwidth_matches_hand_value() {
        // sd of 0..=4 with n-1 is sqrt(2.5); IQR is 2 so IQR/1.34 < sd.
        let h = silverman_bandwidth(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let want = 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2);
        assert!((h - want).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let kde = TimestampKde::fit(vec![0.0, 1.0, 5.0, 5.5]);
        let dx = 0.01;
        let total: f64 = (-2000..2000).map(|i| kde.density(i as f64 * dx) * dx).sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn evictor_prefers_crowded_timestamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut crowded = 0;
        for _ in 0..200 {
            let pts = (0..10).map(|i| (i, i as u32 * 50)).chain((10..40).map(|i| (i, 1000 + (i as u32 % 5))));
            let mut e = DensityEvictor::new(pts);
            if e.evict(&mut rng).unwrap() >= 10 {
                crowded += 1;
            }
        }
        assert_eq!(crowded, 200);
    }

    #[test]
    fn evictor_skips_protected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = DensityEvictor::new([(1, 5)]);
        e.add_protected(2, 5);
        e.add_protected(3, 9);
        assert_eq!(e.evict(&mut rng), Some(1));
        assert_eq!(e.evict(&mut rng), None);
    }

    #[test]
    fn tv_of_uniform_counts_is_zero() {
        let ts: Vec<u32> = (0..100).collect();
        assert!(tv_to_uniform(&ts, 0, 100, 10) < 1e-12);
        assert!((tv_to_uniform(&[0; 10], 0, 100, 10) - 0.9).abs() < 1e-12);
    }
}
