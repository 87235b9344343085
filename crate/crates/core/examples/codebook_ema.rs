//! Exponential-moving-average codebook updates pulling codes onto data clusters.

use aqm::vq::Codebook;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aqm::Result<()> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let centers = [[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]];
    // Codes start well off their clusters.
    let rows: Vec<f64> = centers.iter().flat_map(|c| c.map(|v| v + r.gen_range(-0.25..0.25))).collect();
    let mut cb = Codebook::from_embeddings(3, 2, rows, 0.6, 1e-5)?;
    for step in 0..30 {
        let mut vectors = Vec::new();
        for _ in 0..64 {
            let c = centers[r.gen_range(0..3)];
            vectors.extend([c[0] + r.gen_range(-0.02..0.02), c[1] + r.gen_range(-0.02..0.02)]);
        }
        let idx: Vec<u32> = vectors.chunks(2).map(|v| cb.nearest(v).0 as u32).collect();
        cb.ema_update(&vectors, &idx)?;
        if step % 10 == 9 {
            let codes: Vec<String> = (0..3).map(|k| format!("({:.3}, {:.3})", cb.row(k)[0], cb.row(k)[1])).collect();
            println!("after {:>2} updates: {}", step + 1, codes.join(" "));
        }
    }
    Ok(())
}
