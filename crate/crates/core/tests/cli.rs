use std::path::{Path, PathBuf};

use aqm::cli::{main_with, CHECKPOINT_FILE, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name).to_string_lossy().into_owned()
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = main_with(std::iter::once("aqm").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

fn short_run(out: &Path) -> PathBuf {
    let (code, _) = cli(&[
        "run",
        "--config",
        &config("default.toml"),
        "--out",
        out.to_str().unwrap(),
        "--override",
        "stream.samples_per_class=60",
        "--override",
        "stream.tasks=2",
    ]);
    assert_eq!(code, EXIT_OK);
    out.join(CHECKPOINT_FILE)
}

#[test]
fn missing_config_is_a_usage_error() {
    let (code, _) = cli(&["run", "--config", "/nonexistent/aqm.toml"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn bad_override_and_invalid_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cli(&["run", "--config", &config("default.toml"), "--out", out, "--override", "nokey"]).0, EXIT_USAGE);
    assert_eq!(cli(&["run", "--config", &config("default.toml"), "--out", out, "--override", "capacity=-4"]).0, EXIT_USAGE);
    assert_eq!(cli(&["run", "--config", &config("default.toml"), "--out", out, "--override", "d_th=-1.0"]).0, EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]).0, EXIT_USAGE);
}

#[test]
fn help_exits_zero() {
    assert_eq!(cli(&["--help"]).0, EXIT_OK);
    assert_eq!(cli(&["run", "--help"]).0, EXIT_OK);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.aqmc");
    std::fs::write(&path, b"AQMC not really").unwrap();
    assert_eq!(cli(&["inspect", path.to_str().unwrap()]).0, EXIT_RUNTIME);
    assert_eq!(cli(&["inspect", "/nonexistent/x.aqmc"]).0, EXIT_RUNTIME);
}

#[test]
fn run_writes_every_table_with_its_schema() {
    let dir = tempfile::tempdir().unwrap();
    short_run(dir.path());
    for (stem, cols) in aqm::cli::tables::ALL.iter().take(6) {
        let p = dir.path().join(format!("{stem}.csv"));
        assert_eq!(header(&p), *cols, "{stem}");
    }
    let batches = csv_rows(&dir.path().join("batches.csv"));
    assert_eq!(batches.len(), 2 * 2 * 60 / 10);
    for (i, row) in batches.iter().enumerate() {
        assert_eq!(row[0], i.to_string());
        let used: usize = row[4].parse().unwrap();
        let model: usize = row[5].parse().unwrap();
        assert!(used + model <= 10_000);
    }
    // One accuracy row per task pair with after_task >= task.
    let acc = csv_rows(&dir.path().join("accuracy.csv"));
    assert_eq!(acc.len(), 4);
    let saved = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(saved.contains("samples_per_class = 60"));
}

#[test]
fn inspect_reports_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = short_run(dir.path());
    let (code, text) = cli(&["inspect", ckpt.to_str().unwrap(), "--bins", "4"]);
    assert_eq!(code, EXIT_OK);
    let (stack, memory) = aqm::streamio::checkpoint::load(&ckpt).unwrap();
    assert!(text.contains(&format!("entries {}", memory.len())));
    assert!(text.contains(&format!("model_bytes {}", stack.model_bytes())));
    assert!(text.contains(&format!("levels {}", stack.num_levels())));
}

#[test]
fn inspect_of_an_empty_buffer() {
    use aqm::aqm::{AqmStack, InputShape, LevelConfig, StackConfig};
    let stack = AqmStack::new(StackConfig::new(InputShape::new(1, 4, 4), vec![LevelConfig::new(2, 4, 1)])).unwrap();
    let memory = aqm::memory::MemoryBuffer::new(5000, stack.model_bytes(), 16, aqm::memory::Policy::Reservoir).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.aqmc");
    aqm::streamio::checkpoint::save(&stack, &memory, &p).unwrap();
    let (code, text) = cli(&["inspect", p.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(text.contains("entries 0"));
}

#[test]
fn eval_offline_with_no_training_is_chance() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = short_run(dir.path());
    let out = dir.path().join("eval");
    let (code, _) = cli(&[
        "eval-offline",
        "--config",
        &config("default.toml"),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--epochs",
        "0",
        "--out",
        out.to_str().unwrap(),
        "--override",
        "stream.samples_per_class=60",
        "--override",
        "stream.tasks=2",
    ]);
    assert_eq!(code, EXIT_OK);
    let rows = csv_rows(&out.join("offline_eval.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "checkpoint");
    assert_eq!(rows[0][2], "0");
    // An untrained linear head predicts one class for everything: 1 of 4 balanced classes.
    let acc: f64 = rows[0][3].parse().unwrap();
    assert!((acc - 0.25).abs() < 0.1, "accuracy {acc}");
}

#[test]
fn ablate_drift_emits_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = cli(&[
        "ablate-drift",
        "--config",
        &config("drift_ablation.toml"),
        "--seed",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "thresholds=[0.04, 0.06]",
        "--override",
        "base.stream.samples_per_class=60",
    ]);
    assert_eq!(code, EXIT_OK, "{text}");
    let runs = csv_rows(&dir.path().join("drift_runs.csv"));
    assert_eq!(runs.len(), 4);
    assert!(runs.iter().all(|r| r[2] == "2"));
    let series = csv_rows(&dir.path().join("drift_series.csv"));
    assert_eq!(header(&dir.path().join("drift_series.csv")), aqm::cli::tables::DRIFT_SERIES);
    assert!(!series.is_empty());
}

#[test]
fn rate_from_dims_and_config() {
    let (code, text) = cli(&["rate", "--latent-height", "16", "--latent-width", "16", "-k", "128"]);
    assert_eq!(code, EXIT_OK);
    assert!(text.contains("96/7"), "{text}");
    let (code, text) = cli(&["rate", "--config", &config("default.toml")]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(text.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 2, "{text}");
    assert_eq!(cli(&["rate", "--latent-height", "16"]).0, EXIT_USAGE);
    assert_eq!(cli(&["rate", "--latent-height", "0", "--latent-width", "16", "-k", "8"]).0, EXIT_USAGE);
}
