//! Full online run: compression, replay from memory and a linear learner, compared
//! against raw replay and plain fine-tuning.

use aqm::trainer::{run, Method, RunConfig};

fn main() -> aqm::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/classification.toml").into());
    let base = RunConfig::from_toml(&std::fs::read_to_string(path)?)?;
    for method in [Method::Aqm, Method::RawReplay, Method::FineTune] {
        let cfg = RunConfig { method, ..base.clone() };
        let r = run(&cfg)?;
        println!(
            "{method:<10} accuracy {:.3} forgetting {:.3} entries {} freezes {}",
            r.accuracy().unwrap_or(f64::NAN),
            r.forgetting().unwrap_or(f64::NAN),
            r.final_entries(),
            r.freeze_events.len()
        );
    }
    Ok(())
}
