//! Symmetric nearest-neighbour RMSE between a point cloud and a noisy copy.

use aqm::metrics::snnrmse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aqm::Result<()> {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let cloud: Vec<[f64; 3]> = (0..500).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
    for sigma in [0.0, 0.01, 0.05, 0.1] {
        let noisy: Vec<[f64; 3]> = cloud.iter().map(|p| p.map(|v| v + sigma * r.gen_range(-1.0..1.0))).collect();
        println!("noise {sigma:<5} snnrmse {:.5}", snnrmse(&cloud, &noisy)?);
    }
    Ok(())
}
