//! Trains a two-level stack on a synthetic stream and shows how the distortion
//! threshold decides which level each sample is stored at.

use aqm::aqm::{AqmStack, InputShape, LevelConfig, StackConfig};
use aqm::streamio::synthetic::{synthetic_stream, StreamSpec};

fn main() -> aqm::Result<()> {
    let spec = StreamSpec { tasks: 1, classes_per_task: 4, samples_per_class: 1500, height: 8, width: 8, seed: 3, ..Default::default() };
    let mut stream = synthetic_stream(&spec)?;
    let mut cfg = StackConfig::new(InputShape::new(1, 8, 8), vec![LevelConfig::new(8, 64, 1), LevelConfig::new(4, 16, 1)]);
    cfg.seed = 3;
    cfg.lr = 0.003;
    let mut stack = AqmStack::new(cfg)?;
    let mut last = None;
    while let Some(b) = stream.next_batch() {
        stack.train_step(&b.images)?;
        last = Some(b.images);
    }
    let x = last.expect("non-empty stream");
    for (level, mse) in stack.level_mse(&x)?.iter().enumerate() {
        println!("level {} mean MSE {:.5}, rate {:.1}", level + 1, mse.iter().sum::<f64>() / mse.len() as f64, stack.level_rate(level + 1)?.value());
    }
    for d_th in [1e-3, 0.01, 0.02, 0.05] {
        let mut counts = vec![0; stack.num_levels() + 1];
        let mut bytes = 0;
        for s in stack.compress_batch(&x, d_th)? {
            counts[s.level as usize] += 1;
            bytes += s.payload_bytes();
        }
        println!("d_th {d_th:<7} samples per level (raw first) {counts:?}, {bytes} payload bytes");
    }
    Ok(())
}
