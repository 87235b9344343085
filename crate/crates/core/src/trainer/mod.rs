//! The online loop: stream batches, self-replay, compressor and learner updates,
//! representation refresh and stream sampling into memory.

mod ablation;
mod config;

pub use ablation::{
    drift_ablation, evaluate_buffer, offline_eval, DriftAblationConfig, DriftRun, OfflineEvalConfig, OfflineRow,
    Variant,
};
pub use config::{apply_overrides, Method, RunConfig};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aqm::{AqmStack, FreezeMonitor, StackConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::memory::{MemoryBuffer, Policy};
use crate::metrics::{AccMatrix, DriftProbe, LinearProbe};
use crate::streamio::{checkpoint, synthetic_stream, Dataset, TaskStream};

#[derive(Clone, Debug, PartialEq)]
pub struct LevelLog {
    pub level: usize,
    /// Training loss of the first inner iteration.
    pub loss: f64,
    /// Pre-update input-space MSE on the incoming batch.
    pub stream_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLog {
    pub batch: u32,
    pub task: usize,
    pub levels: Vec<LevelLog>,
    pub replayed: usize,
    pub learner_loss: Option<f64>,
    pub bytes_used: usize,
    pub model_bytes: usize,
    /// Entry count per level `0..=L` after the batch.
    pub entries: Vec<usize>,
    pub bytes_by_level: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeEvent {
    pub batch: u32,
    pub level: usize,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub seed: u64,
    pub method: Method,
    pub batches: Vec<BatchLog>,
    pub freeze_events: Vec<FreezeEvent>,
    /// `(batch, drift)` of held-out first-task samples stored at the end of task 1.
    pub drift: Vec<(u32, f64)>,
    pub acc: Option<AccMatrix>,
    pub capacity: usize,
    pub model_bytes: usize,
    pub checkpoint: Vec<u8>,
}

impl RunReport {
    pub fn final_entries(&self) -> usize {
        self.batches.last().map_or(0, |b| b.entries.iter().sum())
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.acc.as_ref()?.accuracy().ok()
    }

    pub fn forgetting(&self) -> Option<f64> {
        self.acc.as_ref()?.forgetting().ok()
    }
}

/// Live state of a run, exposed so callers can drive the loop batch by batch.
pub struct Session {
    pub config: RunConfig,
    pub stack: AqmStack,
    pub memory: MemoryBuffer,
    pub learner: Option<LinearProbe>,
    pub monitor: FreezeMonitor,
    pub rng: ChaCha8Rng,
    pub stream: TaskStream,
    report: RunReport,
    drift_probe: Option<DriftProbe>,
    current_task: usize,
}

/// Derived seed; kept below 2^63 so it survives TOML serialization.
fn mix(a: u64, b: u64) -> u64 {
    (a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(17)) >> 1
}

/// Stack configuration actually used by `config`: input dims from the stream and the
/// run seed; no levels for the baselines.
pub fn effective_stack_config(config: &RunConfig) -> StackConfig {
    let mut s = config.stack.clone();
    let d = config.stream.dims();
    s.input = crate::aqm::InputShape::new(d[0], d[1], d[2]);
    s.seed = mix(config.seed, 1);
    if config.method != Method::Aqm {
        s.levels.clear();
        s.freeze_thresholds.clear();
    }
    s
}

/// The stream a run with `config` consumes, test sets included.
pub fn run_stream(config: &RunConfig) -> Result<TaskStream> {
    let mut spec = config.stream.clone();
    spec.seed = mix(config.seed, spec.seed.wrapping_add(2));
    synthetic_stream(&spec)
}

pub(crate) fn all_test(sets: &[Dataset]) -> (Vec<Tensor>, Vec<u16>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in sets {
        xs.extend(s.images.iter().cloned());
        ys.extend(s.labels.iter().copied());
    }
    (xs, ys)
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let stream = run_stream(&config)?;
        let stack = AqmStack::new(effective_stack_config(&config))?;
        let model_bytes = stack.model_bytes();
        let memory = MemoryBuffer::new(config.capacity, model_bytes, stack.payload_bytes(0), config.policy)?;
        let learner = if config.probe {
            let classes = config.stream.num_classes()?.max(2);
            Some(LinearProbe::new(stack.config().input.numel(), classes, config.learner.lr, mix(config.seed, 3))?)
        } else {
            None
        };
        let monitor = FreezeMonitor::new(stack.num_levels(), stack.config().freeze_window);
        let tasks = stream.num_tasks();
        let report = RunReport {
            seed: config.seed,
            method: config.method,
            batches: Vec::new(),
            freeze_events: Vec::new(),
            drift: Vec::new(),
            acc: config.probe.then(|| AccMatrix::new(tasks)),
            capacity: config.capacity,
            model_bytes,
            checkpoint: Vec::new(),
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(mix(config.seed, 4)),
            config,
            stack,
            memory,
            learner,
            monitor,
            stream,
            report,
            drift_probe: None,
            current_task: 0,
        })
    }

    fn uses_replay(&self) -> bool {
        self.config.replay && self.config.method != Method::FineTune
    }

    /// Processes one stream batch; returns `false` once the stream is exhausted.
    pub fn step(&mut self) -> Result<bool> {
        let Some(batch) = self.stream.next_batch() else { return Ok(false) };
        if batch.task != self.current_task {
            self.finish_task(self.current_task)?;
            self.current_task = batch.task;
        }
        let seed = self.config.seed;
        let wrap = |e: Error| Error::Aborted { batch: batch.index, seed, source: Box::new(e) };
        let log = self.process(&batch.images, &batch.labels, batch.task, batch.index).map_err(wrap)?;
        if self.memory.used() + self.memory.model_bytes() > self.memory.capacity() {
            return Err(Error::Aborted {
                batch: batch.index,
                seed: self.config.seed,
                source: Box::new(Error::Budget(format!(
                    "{} entry bytes + {} model bytes > capacity {}",
                    self.memory.used(),
                    self.memory.model_bytes(),
                    self.memory.capacity()
                ))),
            });
        }
        if self.drift_probe.is_some() {
            let d = self.drift_probe.as_ref().expect("probe").drift(&self.stack)?;
            self.report.drift.push((batch.index, d));
        }
        self.report.batches.push(log);
        Ok(true)
    }

    fn process(&mut self, images: &Tensor, labels: &[u16], task: usize, index: u32) -> Result<BatchLog> {
        let n_inc = labels.len();
        let levels = self.stack.num_levels();
        let stream_mse: Vec<f64> = if levels > 0 {
            self.stack.level_mse(images)?.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect()
        } else {
            Vec::new()
        };
        let mut first_losses: Option<Vec<f64>> = None;
        let mut learner_loss = None;
        let mut replayed = 0;
        for _ in 0..self.config.inner_iterations {
            let replay = if task > 0 && self.uses_replay() && !self.memory.is_empty() {
                self.memory.sample_replay(n_inc, &self.stack, &mut self.rng)?
            } else {
                Vec::new()
            };
            replayed += replay.len();
            let mut xs: Vec<Tensor> = images.unstack();
            let mut ys: Vec<Option<u16>> = labels.iter().map(|&l| Some(l)).collect();
            for r in &replay {
                xs.push(r.x.clone());
                ys.push(r.label);
            }
            let batch = Tensor::stack(&xs)?;
            if levels > 0 {
                let stats = self.stack.train_step(&batch)?;
                first_losses.get_or_insert(stats.losses);
            }
            if let Some(learner) = self.learner.as_mut() {
                let pairs: Vec<(&Tensor, u16)> = xs.iter().zip(&ys).filter_map(|(x, y)| y.map(|y| (x, y))).collect();
                let bx: Vec<&Tensor> = pairs.iter().map(|p| p.0).collect();
                let by: Vec<u16> = pairs.iter().map(|p| p.1).collect();
                let l = learner.train_batch(&bx, &by)?;
                learner_loss.get_or_insert(l);
            }
            if !replay.is_empty() && levels > 0 {
                let ids: Vec<u64> = replay.iter().map(|r| r.id).collect();
                self.memory.update_buffer_rep(&ids, &self.stack, self.config.d_th)?;
            }
        }
        if levels > 0 {
            self.monitor.record(&stream_mse);
            for level in self.stack.maybe_freeze(&self.monitor) {
                info!("batch {index}: level {level} codebooks frozen");
                self.report.freeze_events.push(FreezeEvent { batch: index, level });
                if self.config.auto_kde && self.memory.policy() != Policy::Kde {
                    self.memory.set_policy(Policy::Kde);
                }
            }
        }
        if self.config.method != Method::FineTune {
            let xs = images.unstack();
            let ys: Vec<Option<u16>> = labels.iter().map(|&l| Some(l)).collect();
            self.memory.add_batch(&xs, &ys, index, &self.stack, self.config.d_th, &mut self.rng)?;
        }
        let losses = first_losses.unwrap_or_default();
        let level_logs = (0..levels)
            .map(|i| LevelLog { level: i + 1, loss: losses.get(i).copied().unwrap_or(f64::NAN), stream_mse: stream_mse[i] })
            .collect();
        if self.config.log_every > 0 && (index as usize).is_multiple_of(self.config.log_every) {
            debug!(
                "batch {index} task {task}: mse {:?} used {} entries {}",
                stream_mse,
                self.memory.used(),
                self.memory.len()
            );
        }
        Ok(BatchLog {
            batch: index,
            task,
            levels: level_logs,
            replayed,
            learner_loss,
            bytes_used: self.memory.used(),
            model_bytes: self.memory.model_bytes(),
            entries: self.memory.level_counts(levels),
            bytes_by_level: self.memory.level_bytes(levels),
        })
    }

    fn finish_task(&mut self, task: usize) -> Result<()> {
        if let (Some(learner), Some(acc)) = (self.learner.as_ref(), self.report.acc.as_mut()) {
            let row = self
                .stream
                .test_sets()
                .iter()
                .map(|d| learner.accuracy(&d.images, &d.labels))
                .collect::<Result<Vec<_>>>()?;
            info!("task {} done: accuracies {:?}", task + 1, row);
            acc.set_row(task, row)?;
        }
        if task == 0 && self.config.drift_probe && self.stack.num_levels() > 0 {
            let held = &self.stream.test_sets()[0];
            let n = held.len().min(self.config.drift_probe_size);
            if n > 0 {
                let x = Tensor::stack(&held.images[..n])?;
                let probe = DriftProbe::capture(&self.stack, &x, self.stack.num_levels(), self.report.batches.last().map_or(0, |b| b.batch))?;
                self.drift_probe = Some(probe);
            }
        }
        Ok(())
    }

    /// Test accuracy of the learner on the union of all task test sets.
    pub fn learner_accuracy(&self) -> Option<f64> {
        let learner = self.learner.as_ref()?;
        let (xs, ys) = all_test(self.stream.test_sets());
        learner.accuracy(&xs, &ys).ok()
    }

    pub fn finish(mut self) -> Result<RunReport> {
        while self.step()? {}
        self.finish_task(self.current_task)?;
        self.report.checkpoint = checkpoint::to_bytes(&self.stack, &self.memory)?;
        Ok(self.report)
    }

    /// Finishes the run and also returns the final stack and memory.
    pub fn finish_with_state(mut self) -> Result<(RunReport, AqmStack, MemoryBuffer, Vec<Dataset>)> {
        while self.step()? {}
        self.finish_task(self.current_task)?;
        self.report.checkpoint = checkpoint::to_bytes(&self.stack, &self.memory)?;
        let test = self.stream.test_sets().to_vec();
        Ok((self.report, self.stack, self.memory, test))
    }
}

/// Runs the whole stream.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    Session::new(config.clone())?.finish()
}
