//! Trains a fresh classifier offline on what each buffer variant retained.

use aqm::trainer::{apply_overrides, offline_eval, OfflineEvalConfig};

fn main() -> aqm::Result<()> {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/offline_eval.toml"))?;
    let cfg: OfflineEvalConfig = apply_overrides(&text, &["seeds=[1]".into()])?;
    for r in offline_eval(&cfg)? {
        println!("{:<14} accuracy {:.3} entries {:>5} bytes {:>6}", r.variant.name(), r.accuracy, r.entries, r.bytes_used);
    }
    Ok(())
}
