//! CSV emission. Every table is long-format and its header is listed in
//! `schemas/csv.toml`; floats use Rust's shortest round-trip formatting.

use std::path::Path;

use crate::error::Result;
use crate::trainer::{DriftRun, OfflineRow, RunReport};

pub const BATCHES: &[&str] = &["batch", "task", "replayed", "learner_loss", "bytes_used", "model_bytes"];
pub const LOSSES: &[&str] = &["batch", "level", "loss", "stream_mse"];
pub const BUFFER: &[&str] = &["batch", "level", "entries", "bytes"];
pub const FREEZE_EVENTS: &[&str] = &["batch", "level"];
pub const DRIFT: &[&str] = &["batch", "drift"];
pub const ACCURACY: &[&str] = &["after_task", "task", "accuracy"];
pub const DRIFT_RUNS: &[&str] = &[
    "threshold",
    "freeze",
    "seed",
    "capture_batch",
    "threshold_reached",
    "diverged",
    "mean_drift",
    "mean_stream_mse",
];
pub const DRIFT_SERIES: &[&str] = &["threshold", "freeze", "seed", "batch", "stream_mse", "drift"];
pub const OFFLINE_EVAL: &[&str] = &["variant", "seed", "epochs", "accuracy", "entries", "bytes_used", "model_bytes"];

/// `(file stem, header)` of every table the CLI can emit.
pub const ALL: &[(&str, &[&str])] = &[
    ("batches", BATCHES),
    ("losses", LOSSES),
    ("buffer", BUFFER),
    ("freeze_events", FREEZE_EVENTS),
    ("drift", DRIFT),
    ("accuracy", ACCURACY),
    ("drift_runs", DRIFT_RUNS),
    ("drift_series", DRIFT_SERIES),
    ("offline_eval", OFFLINE_EVAL),
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn write(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        debug_assert_eq!(r.len(), header.len());
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-run tables into `dir`.
pub fn write_run(dir: &Path, report: &RunReport) -> Result<()> {
    let b = &report.batches;
    write(
        &dir.join("batches.csv"),
        BATCHES,
        b.iter().map(|l| {
            vec![
                l.batch.to_string(),
                l.task.to_string(),
                l.replayed.to_string(),
                opt(l.learner_loss),
                l.bytes_used.to_string(),
                l.model_bytes.to_string(),
            ]
        }),
    )?;
    write(
        &dir.join("losses.csv"),
        LOSSES,
        b.iter().flat_map(|l| {
            l.levels.iter().map(move |v| {
                vec![l.batch.to_string(), v.level.to_string(), v.loss.to_string(), v.stream_mse.to_string()]
            })
        }),
    )?;
    write(
        &dir.join("buffer.csv"),
        BUFFER,
        b.iter().flat_map(|l| {
            l.entries.iter().zip(&l.bytes_by_level).enumerate().map(move |(lv, (n, by))| {
                vec![l.batch.to_string(), lv.to_string(), n.to_string(), by.to_string()]
            })
        }),
    )?;
    write(
        &dir.join("freeze_events.csv"),
        FREEZE_EVENTS,
        report.freeze_events.iter().map(|e| vec![e.batch.to_string(), e.level.to_string()]),
    )?;
    write(&dir.join("drift.csv"), DRIFT, report.drift.iter().map(|(b, d)| vec![b.to_string(), d.to_string()]))?;
    let mut acc = Vec::new();
    if let Some(m) = &report.acc {
        for t in 0..m.tasks() {
            if let Some(row) = m.row(t) {
                for (j, a) in row.iter().enumerate() {
                    acc.push(vec![(t + 1).to_string(), (j + 1).to_string(), a.to_string()]);
                }
            }
        }
    }
    write(&dir.join("accuracy.csv"), ACCURACY, acc)
}

pub fn write_drift(dir: &Path, runs: &[DriftRun]) -> Result<()> {
    write(
        &dir.join("drift_runs.csv"),
        DRIFT_RUNS,
        runs.iter().map(|r| {
            vec![
                r.threshold.to_string(),
                r.freeze.to_string(),
                r.seed.to_string(),
                opt(r.capture_batch),
                r.threshold_reached.to_string(),
                r.diverged.to_string(),
                r.mean_drift().to_string(),
                r.mean_stream_mse().to_string(),
            ]
        }),
    )?;
    write(
        &dir.join("drift_series.csv"),
        DRIFT_SERIES,
        runs.iter().flat_map(|r| {
            let mut drift = r.drift.iter().peekable();
            r.stream_mse.iter().map(move |&(batch, mse)| {
                let d = drift.next_if(|p| p.0 == batch).map(|p| p.1);
                vec![
                    r.threshold.to_string(),
                    r.freeze.to_string(),
                    r.seed.to_string(),
                    batch.to_string(),
                    mse.to_string(),
                    opt(d),
                ]
            })
        }),
    )
}

pub fn write_offline(dir: &Path, epochs: usize, rows: &[OfflineRow]) -> Result<()> {
    write(
        &dir.join("offline_eval.csv"),
        OFFLINE_EVAL,
        rows.iter().map(|r| {
            vec![
                r.variant.name().to_string(),
                r.seed.to_string(),
                epochs.to_string(),
                r.accuracy.to_string(),
                r.entries.to_string(),
                r.bytes_used.to_string(),
                r.model_bytes.to_string(),
            ]
        }),
    )
}

/// Row for an evaluated checkpoint, which has no ablation variant.
pub fn write_offline_checkpoint(dir: &Path, seed: u64, epochs: usize, accuracy: f64, entries: usize, bytes_used: usize, model_bytes: usize) -> Result<()> {
    write(
        &dir.join("offline_eval.csv"),
        OFFLINE_EVAL,
        [vec![
            "checkpoint".to_string(),
            seed.to_string(),
            epochs.to_string(),
            accuracy.to_string(),
            entries.to_string(),
            bytes_used.to_string(),
            model_bytes.to_string(),
        ]],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &str = include_str!("../../schemas/csv.toml");

    #[test]
    fn headers_match_schema() {
        let schema: toml::Table = toml::from_str(SCHEMA).unwrap();
        assert_eq!(schema.len(), ALL.len(), "schema lists a table the CLI does not emit");
        for (stem, header) in ALL {
            let t = schema.get(*stem).and_then(|v| v.as_table()).unwrap_or_else(|| panic!("{stem} missing from schema"));
            let cols: Vec<&str> = t["columns"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
            assert_eq!(&cols, header, "{stem}");
            let doc = t["doc"].as_table().unwrap();
            assert_eq!(doc.len(), cols.len(), "{stem}: one doc line per column");
            for c in &cols {
                assert!(doc.contains_key(*c), "{stem}.{c} undocumented");
            }
        }
    }
}
