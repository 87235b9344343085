//! The `aqm` command line. [`main_with`] parses arguments, runs one subcommand and
//! returns the process exit code: 0 on success, 1 when a run fails, 2 on usage or
//! configuration errors.

pub mod tables;

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::aqm::{compression_rate, AqmStack, InputShape};
use crate::codes::Payload;
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::streamio::checkpoint;
use crate::trainer::{self, apply_overrides, DriftAblationConfig, OfflineEvalConfig, RunConfig, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.aqmc";

#[derive(Debug, Parser)]
#[command(name = "aqm", version, about = "Online continual compression with adaptive quantization modules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the config seed (for sweeps: runs only this seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// `key.path=value` applied to the config before parsing; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One online run; writes per-batch CSVs and the final checkpoint.
    Run(Common),
    /// Codebook-freezing drift ablation over thresholds and seeds.
    AblateDrift(Common),
    /// Offline iid evaluation of stored reconstructions, for ablation variants or one checkpoint.
    EvalOffline {
        #[command(flatten)]
        common: Common,
        /// Evaluate this checkpoint instead; `--config` is then the run config that produced it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replaces the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Text report of a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        /// Histogram bins for entry timestamps.
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Compression rate of a level, from explicit dims or from every level of a run config.
    Rate(RateArgs),
}

#[derive(Debug, Args)]
pub struct RateArgs {
    #[arg(long, conflicts_with_all = ["channels", "height", "width", "latent_height", "latent_width", "codebook_size"])]
    pub config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE", requires = "config")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, required_unless_present = "config")]
    pub latent_height: Option<usize>,
    #[arg(long, required_unless_present = "config")]
    pub latent_width: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub codebooks: usize,
    #[arg(long = "codebook-size", short = 'k', required_unless_present = "config")]
    pub codebook_size: Option<usize>,
}

/// A failure tagged with the exit code it maps to.
struct Failure {
    code: i32,
    error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: EXIT_USAGE, error }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if matches!(error, Error::Config(_)) { EXIT_USAGE } else { EXIT_RUNTIME };
        Self { code, error }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Reads `path` and applies overrides; every failure here is a usage error.
fn load_config<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> std::result::Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(Error::Config(format!("cannot read config {}: {e}", path.display()))))?;
    apply_overrides(&text, overrides).map_err(usage)
}

fn out_dir(dir: &Path) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure { code: EXIT_RUNTIME, error: e.into() })
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
/// Reports go to `stdout`, diagnostics to stderr.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> CliResult {
    let mut text = String::new();
    match command {
        Command::Run(c) => cmd_run(&c, &mut text)?,
        Command::AblateDrift(c) => cmd_drift(&c, &mut text)?,
        Command::EvalOffline { common, checkpoint, epochs } => match checkpoint {
            Some(p) => cmd_eval_checkpoint(&common, &p, epochs, &mut text)?,
            None => cmd_eval_variants(&common, epochs, &mut text)?,
        },
        Command::Inspect { checkpoint, bins } => {
            let (stack, memory) = checkpoint::load(&checkpoint)?;
            text = inspect_report(&stack, &memory, bins)?;
        }
        Command::Rate(r) => cmd_rate(&r, &mut text)?,
    }
    stdout.write_all(text.as_bytes()).map_err(|e| Failure { code: EXIT_RUNTIME, error: e.into() })
}

fn cmd_run(c: &Common, text: &mut String) -> CliResult {
    let mut config: RunConfig = load_config(&c.config, &c.overrides)?;
    if let Some(s) = c.seed {
        config.seed = s;
    }
    config.validate().map_err(usage)?;
    out_dir(&c.out)?;
    let report = trainer::run(&config)?;
    std::fs::write(c.out.join("config.toml"), config.to_toml()?).map_err(Error::from)?;
    tables::write_run(&c.out, &report)?;
    std::fs::write(c.out.join(CHECKPOINT_FILE), &report.checkpoint).map_err(Error::from)?;
    let _ = writeln!(text, "seed {} method {}", report.seed, report.method);
    let _ = writeln!(text, "batches {}", report.batches.len());
    let _ = writeln!(text, "entries {}", report.final_entries());
    if let Some(b) = report.batches.last() {
        let _ = writeln!(text, "bytes_used {} model_bytes {} capacity {}", b.bytes_used, b.model_bytes, report.capacity);
    }
    if let Some(a) = report.accuracy() {
        let _ = writeln!(text, "accuracy {a}");
    }
    if let Some(f) = report.forgetting() {
        let _ = writeln!(text, "forgetting {f}");
    }
    let _ = writeln!(text, "freeze_events {}", report.freeze_events.len());
    Ok(())
}

fn cmd_drift(c: &Common, text: &mut String) -> CliResult {
    let mut cfg: DriftAblationConfig = load_config(&c.config, &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    cfg.base.validate().map_err(usage)?;
    out_dir(&c.out)?;
    let runs = trainer::drift_ablation(&cfg)?;
    tables::write_drift(&c.out, &runs)?;
    let _ = writeln!(text, "threshold freeze mean_drift mean_stream_mse diverged");
    for &t in &cfg.thresholds {
        for freeze in [true, false] {
            let sel: Vec<_> = runs.iter().filter(|r| r.threshold == t && r.freeze == freeze).collect();
            let ok: Vec<_> = sel.iter().filter(|r| !r.diverged).collect();
            let mean = |f: &dyn Fn(&trainer::DriftRun) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            let _ = writeln!(
                text,
                "{t} {freeze} {} {} {}",
                mean(&|r| r.mean_drift()),
                mean(&|r| r.mean_stream_mse()),
                sel.len() - ok.len()
            );
        }
    }
    Ok(())
}

fn cmd_eval_variants(c: &Common, epochs: Option<usize>, text: &mut String) -> CliResult {
    let mut cfg: OfflineEvalConfig = load_config(&c.config, &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.base.validate().map_err(usage)?;
    out_dir(&c.out)?;
    let rows = trainer::offline_eval(&cfg)?;
    tables::write_offline(&c.out, cfg.epochs, &rows)?;
    let _ = writeln!(text, "variant mean_accuracy mean_entries");
    for v in &cfg.variants {
        let sel: Vec<_> = rows.iter().filter(|r| r.variant == *v).collect();
        let n = sel.len().max(1) as f64;
        let acc = sel.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let ent = sel.iter().map(|r| r.entries as f64).sum::<f64>() / n;
        let _ = writeln!(text, "{} {acc} {ent}", Variant::name(v));
    }
    Ok(())
}

fn cmd_eval_checkpoint(c: &Common, path: &Path, epochs: Option<usize>, text: &mut String) -> CliResult {
    let mut config: RunConfig = load_config(&c.config, &c.overrides)?;
    if let Some(s) = c.seed {
        config.seed = s;
    }
    config.validate().map_err(usage)?;
    let epochs = epochs.unwrap_or(10);
    let (stack, memory) = checkpoint::load(path)?;
    let stream = trainer::run_stream(&config)?;
    let acc = trainer::evaluate_buffer(&stack, &memory, stream.test_sets(), epochs, &config.learner, config.seed)?;
    out_dir(&c.out)?;
    tables::write_offline_checkpoint(&c.out, config.seed, epochs, acc, memory.len(), memory.used(), memory.model_bytes())?;
    let _ = writeln!(text, "accuracy {acc}");
    let _ = writeln!(text, "entries {}", memory.len());
    Ok(())
}

fn cmd_rate(r: &RateArgs, text: &mut String) -> CliResult {
    match &r.config {
        Some(path) => {
            let config: RunConfig = load_config(path, &r.overrides)?;
            let scfg = trainer::effective_stack_config(&config);
            let shapes = scfg.level_shapes().map_err(usage)?;
            let _ = writeln!(text, "level grid rate");
            for (i, (lc, (_, [_, h, w]))) in scfg.levels.iter().zip(shapes).enumerate() {
                let rate = compression_rate(scfg.input, h, w, lc.num_codebooks, lc.codebook_size)?;
                let _ = writeln!(
                    text,
                    "{} {}x{}x{} {} ({}/{})",
                    i + 1,
                    lc.num_codebooks,
                    h,
                    w,
                    rate.value(),
                    rate.numerator,
                    rate.denominator
                );
            }
        }
        None => {
            let (lh, lw, k) = match (r.latent_height, r.latent_width, r.codebook_size) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(usage(Error::Config("latent dims and codebook size are required".into()))),
            };
            let rate = compression_rate(InputShape::new(r.channels, r.height, r.width), lh, lw, r.codebooks, k)?;
            let _ = writeln!(text, "{} ({}/{})", rate.value(), rate.numerator, rate.denominator);
        }
    }
    Ok(())
}

/// Entries and bytes per level, realized against nominal compression rates and a
/// timestamp histogram.
pub fn inspect_report(stack: &AqmStack, memory: &MemoryBuffer, bins: usize) -> Result<String> {
    let levels = stack.num_levels();
    let mut s = String::new();
    let counts = memory.level_counts(levels);
    let bytes = memory.level_bytes(levels);
    let _ = writeln!(s, "levels {levels}");
    let _ = writeln!(s, "entries {}", memory.len());
    let _ = writeln!(s, "labelled {}", memory.entries().filter(|e| e.label.is_some()).count());
    let _ = writeln!(s, "bytes_used {}", memory.used());
    let _ = writeln!(s, "model_bytes {}", memory.model_bytes());
    let _ = writeln!(s, "total_bytes {}", memory.used() + memory.model_bytes());
    let _ = writeln!(s, "capacity {}", memory.capacity());
    let _ = writeln!(s, "policy {:?}", memory.policy());
    let _ = writeln!(s, "level entries bytes nominal_rate realized_rate frozen");
    let input_bits = (stack.config().input.numel() * 8) as f64;
    for lv in 0..=levels {
        if lv == 0 {
            let _ = writeln!(s, "0 {} {} 1 1 -", counts[0], bytes[0]);
            continue;
        }
        let nominal = stack.level_rate(lv)?.value();
        let bits: Vec<usize> = memory
            .entries()
            .filter(|e| e.sample.level as usize == lv)
            .filter_map(|e| match &e.sample.payload {
                Payload::Indices(g) => Some(g.bit_len()),
                Payload::Raw(_) => None,
            })
            .collect();
        let realized = if bits.is_empty() {
            "-".to_string()
        } else {
            (input_bits * bits.len() as f64 / bits.iter().sum::<usize>() as f64).to_string()
        };
        let frozen = stack.level(lv).is_frozen();
        let _ = writeln!(s, "{lv} {} {} {nominal} {realized} {frozen}", counts[lv], bytes[lv]);
    }
    let ts = memory.timestamps();
    if let (Some(&lo), Some(&hi)) = (ts.iter().min(), ts.iter().max()) {
        let bins = bins.max(1);
        let width = ((hi - lo) as usize / bins + 1).max(1);
        let mut hist = vec![0usize; bins];
        for &t in &ts {
            hist[((t - lo) as usize / width).min(bins - 1)] += 1;
        }
        let _ = writeln!(s, "timestamp_histogram from to count");
        for (i, n) in hist.iter().enumerate() {
            let a = lo as usize + i * width;
            let _ = writeln!(s, "{a} {} {n}", a + width - 1);
        }
    }
    Ok(s)
}
