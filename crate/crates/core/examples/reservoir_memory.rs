//! A byte-budgeted raw reservoir: every stream item is equally likely to be held.

use aqm::aqm::{AqmStack, InputShape, LevelConfig, StackConfig};
use aqm::autodiff::Tensor;
use aqm::memory::{MemoryBuffer, Policy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aqm::Result<()> {
    let dims = InputShape::new(1, 4, 4);
    // An untrained stack with a zero threshold stores everything raw.
    let stack = AqmStack::new(StackConfig::new(dims, vec![LevelConfig::new(2, 4, 1)]))?;
    let mut mem = MemoryBuffer::new(2000, 0, 16, Policy::Reservoir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..5000u32 {
        let x = Tensor::from_fn(&[1, 4, 4], |_| (t % 255) as f64 / 255.0);
        mem.add_to_memory(&x, Some((t / 500) as u16), t, &stack, 0.0, &mut rng)?;
    }
    let mut per_block = [0usize; 10];
    for e in mem.entries() {
        per_block[e.label.unwrap() as usize] += 1;
    }
    println!("{} entries, {}/{} bytes, seen {}", mem.len(), mem.used(), mem.budget(), mem.seen());
    println!("entries per 500-item block of the stream: {per_block:?}");
    Ok(())
}
