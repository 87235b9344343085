//! Representation drift of stored codes with and without codebook freezing, on a
//! shortened version of the shipped ablation config.

use aqm::trainer::{apply_overrides, drift_ablation, DriftAblationConfig};

fn main() -> aqm::Result<()> {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/drift_ablation.toml"))?;
    let cfg: DriftAblationConfig = apply_overrides(&text, &["seeds=[1]".into(), "thresholds=[0.04]".into()])?;
    for r in drift_ablation(&cfg)? {
        println!(
            "threshold {} freeze {:<5} captured at {:?} mean drift {:.5} mean stream MSE {:.5}",
            r.threshold,
            r.freeze,
            r.capture_batch,
            r.mean_drift(),
            r.mean_stream_mse()
        );
    }
    Ok(())
}
