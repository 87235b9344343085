//! Density-driven eviction flattens a skewed timestamp distribution.

use aqm::codes::CompressedSample;
use aqm::autodiff::Tensor;
use aqm::memory::{tv_to_uniform, MemoryBuffer, Policy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aqm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut mem = MemoryBuffer::new(1 << 20, 0, 4, Policy::Kde)?;
    let x = Tensor::from_fn(&[1, 2, 2], |_| 0.5);
    for _ in 0..1000 {
        let u: f64 = rng.gen();
        mem.insert((1000.0 * u * u) as u32, None, CompressedSample::raw_from_tensor(&x))?;
    }
    println!("{:>8} {:>8} {:>8}", "removed", "entries", "tv");
    let mut removed = 0;
    for round in 0..=8 {
        if round > 0 {
            removed += mem.kde_rebalance(50, 1, &mut rng).len();
        }
        println!("{removed:>8} {:>8} {:>8.4}", mem.len(), tv_to_uniform(&mem.timestamps(), 0, 1000, 20));
    }
    Ok(())
}
