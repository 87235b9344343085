use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{effective_stack_config, mix, RunConfig, Session};
use crate::aqm::{AqmStack, FreezeMonitor};
use crate::autodiff::Tensor;
use crate::codes::CompressedSample;
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::metrics::{DriftProbe, LinearProbe, ProbeConfig};
use crate::streamio::{synthetic_stream, Dataset};

fn d_seeds() -> Vec<u64> {
    (1..=5).collect()
}
fn d_probe_size() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftAblationConfig {
    pub base: RunConfig,
    /// Streaming-MSE thresholds at which codes are captured (and codebooks frozen).
    pub thresholds: Vec<f64>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Held-out first-task samples stored at the capture point.
    #[serde(default = "d_probe_size")]
    pub probe_size: usize,
    /// Also hold the decoder fixed after capture (diagnostic).
    #[serde(default)]
    pub hold_decoder: bool,
}

impl DriftAblationConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRun {
    pub threshold: f64,
    pub freeze: bool,
    pub seed: u64,
    /// Batch at which the probe was stored; `None` if training diverged first.
    pub capture_batch: Option<u32>,
    /// Whether the streaming threshold was met (otherwise capture fell back to the end of task 1).
    pub threshold_reached: bool,
    /// `(batch, pre-update streaming MSE)` for every processed batch.
    pub stream_mse: Vec<(u32, f64)>,
    /// `(batch, drift)` from the capture point on.
    pub drift: Vec<(u32, f64)>,
    pub diverged: bool,
}

impl DriftRun {
    fn after_capture<'a>(&self, series: &'a [(u32, f64)]) -> impl Iterator<Item = f64> + 'a {
        let c = self.capture_batch.unwrap_or(u32::MAX);
        series.iter().filter(move |p| p.0 > c).map(|p| p.1)
    }

    fn mean(it: impl Iterator<Item = f64>) -> f64 {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    }

    /// Mean drift after the capture point; NaN for diverged runs.
    pub fn mean_drift(&self) -> f64 {
        if self.diverged {
            return f64::NAN;
        }
        Self::mean(self.after_capture(&self.drift))
    }

    /// Mean streaming MSE after the capture point; NaN for diverged runs.
    pub fn mean_stream_mse(&self) -> f64 {
        if self.diverged {
            return f64::NAN;
        }
        Self::mean(self.after_capture(&self.stream_mse))
    }
}

/// One drift run: single-module training on the stream, replaying only the stored
/// probe codes once they exist, with or without freezing the codebooks at capture.
pub fn drift_run(cfg: &DriftAblationConfig, threshold: f64, freeze: bool, seed: u64) -> Result<DriftRun> {
    let mut base = cfg.base.clone();
    base.seed = seed;
    let mut scfg = effective_stack_config(&base);
    scfg.freeze = false;
    if scfg.levels.len() != 1 {
        return Err(Error::Config(format!("drift ablation needs one level, got {}", scfg.levels.len())));
    }
    let mut stack = AqmStack::new(scfg)?;
    let mut spec = base.stream.clone();
    spec.seed = mix(seed, spec.seed.wrapping_add(2));
    let mut stream = synthetic_stream(&spec)?;
    let held = &stream.test_sets()[0];
    let n_probe = cfg.probe_size.min(held.len());
    if n_probe == 0 {
        return Err(Error::Config("drift ablation needs held-out first-task samples".into()));
    }
    let originals = Tensor::stack(&held.images[..n_probe])?;
    let first_task_batches = stream.task_batches()[0];
    let mut monitor = FreezeMonitor::new(1, stack.config().freeze_window);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 5));
    let mut run = DriftRun {
        threshold,
        freeze,
        seed,
        capture_batch: None,
        threshold_reached: false,
        stream_mse: Vec::new(),
        drift: Vec::new(),
        diverged: false,
    };
    let mut probe: Option<DriftProbe> = None;
    let mut seen_batches = 0usize;
    while let Some(batch) = stream.next_batch() {
        seen_batches += 1;
        let mse = stack.level_mse(&batch.images)?[0].iter().sum::<f64>() / batch.labels.len() as f64;
        run.stream_mse.push((batch.index, mse));
        let mut xs = batch.images.unstack();
        if let Some(p) = &probe {
            let picks: Vec<&CompressedSample> =
                (0..xs.len()).map(|_| &p.codes()[rng.gen_range(0..p.codes().len())]).collect();
            xs.extend(stack.decode_samples(&picks)?);
        }
        match stack.train_step(&Tensor::stack(&xs)?) {
            Ok(_) => {}
            Err(Error::NonFiniteLoss { .. }) | Err(Error::NonFiniteGradient(_)) => {
                run.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        if !stack.modules().iter().all(|m| m.encoder().params().values().all(|t| t.is_finite())) {
            run.diverged = true;
            break;
        }
        monitor.record(&[mse]);
        if probe.is_none() {
            let reached = monitor.window_mean(1).is_some_and(|m| m < threshold);
            if reached || seen_batches == first_task_batches {
                run.threshold_reached = reached;
                if freeze {
                    stack.level_mut(1).freeze();
                }
                if cfg.hold_decoder {
                    stack.level_mut(1).set_decoder_trainable(false);
                }
                probe = Some(DriftProbe::capture(&stack, &originals, 1, batch.index)?);
                run.capture_batch = Some(batch.index);
            }
        }
        if let Some(p) = &probe {
            let d = p.drift(&stack)?;
            if !d.is_finite() {
                run.diverged = true;
                break;
            }
            run.drift.push((batch.index, d));
        }
    }
    Ok(run)
}

/// Every `(threshold, freeze, seed)` combination, in that nesting order.
pub fn drift_ablation(cfg: &DriftAblationConfig) -> Result<Vec<DriftRun>> {
    let mut out = Vec::new();
    for &t in &cfg.thresholds {
        for freeze in [true, false] {
            for &seed in &cfg.seeds {
                out.push(drift_run(cfg, t, freeze, seed)?);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// First level only.
    SingleModule,
    /// All levels trained end-to-end.
    Coupled,
    /// Always store at the deepest level.
    NoAdaptive,
    NoFreeze,
    /// Raw reservoir replay at the same byte budget.
    RawReservoir,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SingleModule => "single_module",
            Variant::Coupled => "coupled",
            Variant::NoAdaptive => "no_adaptive",
            Variant::NoFreeze => "no_freeze",
            Variant::RawReservoir => "raw_reservoir",
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::SingleModule => {
                c.stack.levels.truncate(1);
                c.stack.freeze_thresholds.truncate(1);
            }
            Variant::Coupled => c.stack.coupled = true,
            Variant::NoAdaptive => c.stack.adaptive = false,
            Variant::NoFreeze => c.stack.freeze = false,
            Variant::RawReservoir => c.method = super::Method::RawReplay,
        }
        c
    }
}

fn d_variants() -> Vec<Variant> {
    vec![
        Variant::Full,
        Variant::SingleModule,
        Variant::Coupled,
        Variant::NoAdaptive,
        Variant::NoFreeze,
        Variant::RawReservoir,
    ]
}
fn d_epochs() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineEvalConfig {
    pub base: RunConfig,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_variants")]
    pub variants: Vec<Variant>,
}

impl OfflineEvalConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineRow {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
    pub entries: usize,
    pub bytes_used: usize,
    pub model_bytes: usize,
}

/// Decodes every labelled entry, fits a fresh linear learner iid for `epochs` and
/// returns its accuracy on the union of `test`.
pub fn evaluate_buffer(
    stack: &AqmStack,
    memory: &MemoryBuffer,
    test: &[Dataset],
    epochs: usize,
    learner: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let ids = memory.ids();
    let items = memory.decode_ids(&ids, stack)?;
    if items.is_empty() || items.iter().any(|i| i.label.is_none()) {
        return Err(Error::Invalid("offline evaluation needs a non-empty, fully labelled buffer".into()));
    }
    let xs: Vec<Tensor> = items.iter().map(|i| i.x.clone()).collect();
    let ys: Vec<u16> = items.iter().map(|i| i.label.expect("labelled")).collect();
    let classes = test
        .iter()
        .flat_map(|d| d.labels.iter())
        .chain(&ys)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(2)
        .max(2);
    let mut probe = LinearProbe::new(stack.config().input.numel(), classes, learner.lr, mix(seed, 6))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 7));
    probe.fit_offline(&xs, &ys, epochs, learner.batch_size, &mut rng)?;
    let (tx, ty) = super::all_test(test);
    probe.accuracy(&tx, &ty)
}

/// Runs each variant for each seed (learner off) and evaluates the final buffer offline.
pub fn offline_eval(cfg: &OfflineEvalConfig) -> Result<Vec<OfflineRow>> {
    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let mut c = variant.apply(&cfg.base);
            c.seed = seed;
            c.probe = false;
            let (_, stack, memory, test) = Session::new(c)?.finish_with_state()?;
            let accuracy = evaluate_buffer(&stack, &memory, &test, cfg.epochs, &cfg.base.learner, seed)?;
            rows.push(OfflineRow {
                variant,
                seed,
                accuracy,
                entries: memory.len(),
                bytes_used: memory.used(),
                model_bytes: memory.model_bytes(),
            });
        }
    }
    Ok(rows)
}
