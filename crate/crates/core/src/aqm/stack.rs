use rayon::prelude::*;

use super::module::{step_network, AqmModule, LevelCodes};
use super::StackConfig;
use crate::autodiff::{AdamConfig, Tape, Tensor};
use crate::codes::{CompressedSample, IndexGrid, Payload};
use crate::error::{Error, Result};

/// Ordered, gradient-isolated quantization modules. Level `i` consumes the
/// quantized output of level `i - 1`; level 0 is the input itself.
#[derive(Clone, Debug)]
pub struct AqmStack {
    config: StackConfig,
    modules: Vec<AqmModule>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    /// Loss of each level, evaluated before its update.
    pub losses: Vec<f64>,
}

impl AqmStack {
    pub fn new(config: StackConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.level_shapes()?;
        let modules = config
            .levels
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, (lv, (inp, lat)))| {
                let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
                let mut m = AqmModule::new(lv.clone(), inp, lat, config.ema_decay, config.laplace_eps, seed)?;
                m.encoder_mut().params_mut().round_to_f32();
                m.decoder_mut().params_mut().round_to_f32();
                m.codebooks_mut().iter_mut().for_each(|c| c.round_to_f32());
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, modules })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut StackConfig {
        &mut self.config
    }

    pub fn num_levels(&self) -> usize {
        self.modules.len()
    }

    pub fn modules(&self) -> &[AqmModule] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [AqmModule] {
        &mut self.modules
    }

    /// 1-based level access.
    pub fn level(&self, level: usize) -> &AqmModule {
        &self.modules[level - 1]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut AqmModule {
        &mut self.modules[level - 1]
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.config.input.dims()
    }

    pub fn any_frozen(&self) -> bool {
        self.modules.iter().any(|m| m.is_frozen())
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(|m| m.param_count()).sum()
    }

    pub fn codebook_elements(&self) -> usize {
        self.modules.iter().map(|m| m.codebook_elements()).sum()
    }

    /// Payload size in bytes of a sample stored at `level`.
    pub fn payload_bytes(&self, level: usize) -> usize {
        if level == 0 {
            self.config.input.numel()
        } else {
            self.level(level).payload_bits().div_ceil(8)
        }
    }

    /// Nominal compression rate of `level` against the raw input.
    pub fn level_rate(&self, level: usize) -> Result<super::CompressionRate> {
        if level == 0 || level > self.num_levels() {
            return Err(Error::Invalid(format!("no level {level} in a {}-level stack", self.num_levels())));
        }
        let m = self.level(level);
        let [_, h, w] = m.latent_dims();
        super::compression_rate(self.config.input, h, w, m.config().num_codebooks, m.config().codebook_size)
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_dims() {
            return Err(Error::Shape(format!(
                "stack expects (N, {:?}), got {:?}",
                self.input_dims(),
                s
            )));
        }
        Ok(s[0])
    }

    /// Forwards every module in turn, returning `(z_q^i, a^i)` for `i = 1..L`.
    pub fn encode_all(&self, x: &Tensor) -> Result<Vec<LevelCodes>> {
        self.check_batch(x)?;
        let mut out: Vec<LevelCodes> = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let input = out.last().map(|c| &c.z_q).unwrap_or(x);
            let z_e = m.encode(input)?;
            out.push(m.quantize(&z_e)?);
        }
        Ok(out)
    }

    /// Decodes a level-`level` latent down to input space and clamps to `[0, 1]`.
    pub fn decode_latent(&self, level: usize, z_q: &Tensor) -> Result<Tensor> {
        let mut cur = z_q.clone();
        for i in (1..=level).rev() {
            cur = self.level(i).decode(&cur)?;
        }
        Ok(cur.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Decodes `n` samples' stored indices from `level`.
    pub fn decode_indices(&self, level: usize, indices: &[u32], n: usize) -> Result<Tensor> {
        if level == 0 || level > self.num_levels() {
            return Err(Error::CorruptPayload(format!("level {level} not in 1..={}", self.num_levels())));
        }
        let z = self.level(level).embed(indices, n)?;
        self.decode_latent(level, &z)
    }

    /// Unpacks a stored payload into index values, validating its geometry.
    pub fn sample_indices(&self, sample: &CompressedSample) -> Result<Vec<u32>> {
        let level = sample.level as usize;
        match &sample.payload {
            Payload::Indices(grid) => {
                if level == 0 || level > self.num_levels() {
                    return Err(Error::CorruptPayload(format!("level {level} not in 1..={}", self.num_levels())));
                }
                let m = self.level(level);
                if grid.len() != m.indices_per_sample() || grid.bits() != m.index_bits() {
                    return Err(Error::CorruptPayload(format!(
                        "level {level} expects {} indices of {} bits, got {} of {}",
                        m.indices_per_sample(),
                        m.index_bits(),
                        grid.len(),
                        grid.bits()
                    )));
                }
                Ok(grid.unpack())
            }
            Payload::Raw(_) => Err(Error::CorruptPayload("raw payload has no indices".into())),
        }
    }

    /// Input-space reconstruction of one stored sample; level 0 is returned verbatim.
    pub fn decode_sample(&self, sample: &CompressedSample) -> Result<Tensor> {
        Ok(self.decode_samples(&[sample])?.pop().expect("one sample"))
    }

    /// Batched [`AqmStack::decode_sample`], grouping samples by level.
    pub fn decode_samples(&self, samples: &[&CompressedSample]) -> Result<Vec<Tensor>> {
        let dims = self.input_dims();
        let mut out: Vec<Option<Tensor>> = vec![None; samples.len()];
        for level in 0..=self.num_levels() {
            let members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].level as usize == level).collect();
            if members.is_empty() {
                continue;
            }
            if level == 0 {
                for &i in &members {
                    match &samples[i].payload {
                        Payload::Raw(bytes) => {
                            if bytes.len() != self.config.input.numel() {
                                return Err(Error::CorruptPayload(format!(
                                    "raw payload of {} bytes, expected {}",
                                    bytes.len(),
                                    self.config.input.numel()
                                )));
                            }
                            out[i] = Some(crate::codes::from_bytes(&dims, bytes)?);
                        }
                        Payload::Indices(_) => {
                            return Err(Error::CorruptPayload("level 0 sample carries indices".into()))
                        }
                    }
                }
                continue;
            }
            let mut idx = Vec::new();
            for &i in &members {
                idx.extend(self.sample_indices(samples[i])?);
            }
            let rec = self.decode_indices(level, &idx, members.len())?;
            for (&i, t) in members.iter().zip(rec.unstack()) {
                out[i] = Some(t);
            }
        }
        if let Some(bad) = samples.iter().find(|s| s.level as usize > self.num_levels()) {
            return Err(Error::CorruptPayload(format!("level {} not in 0..={}", bad.level, self.num_levels())));
        }
        Ok(out.into_iter().map(|t| t.expect("decoded")).collect())
    }

    /// Input-space reconstructions of every level, `[level - 1][sample]`.
    pub fn reconstruct_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let codes = self.encode_all(x)?;
        codes.iter().enumerate().map(|(i, c)| self.decode_latent(i + 1, &c.z_q)).collect()
    }

    /// Per-sample input-space MSE of every level, `[level - 1][sample]`.
    pub fn level_mse(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let recs = self.reconstruct_all(x)?;
        let originals = x.unstack();
        Ok(recs
            .iter()
            .map(|r| r.unstack().iter().zip(&originals).map(|(a, b)| a.mse(b).expect("same shape")).collect())
            .collect())
    }

    /// Picks the deepest level whose reconstruction MSE is below `d_th`, falling back
    /// to the raw input. With adaptive selection disabled the deepest level is used.
    pub fn compress_batch(&self, x: &Tensor, d_th: f64) -> Result<Vec<CompressedSample>> {
        let n = self.check_batch(x)?;
        let originals = x.unstack();
        if self.modules.is_empty() {
            return Ok(originals.iter().map(CompressedSample::raw_from_tensor).collect());
        }
        let codes = self.encode_all(x)?;
        let l = self.num_levels();
        let mut chosen: Vec<Option<usize>> = vec![None; n];
        if !self.config.adaptive {
            chosen.iter_mut().for_each(|c| *c = Some(l));
        } else {
            for level in (1..=l).rev() {
                if chosen.iter().all(|c| c.is_some()) {
                    break;
                }
                let rec = self.decode_latent(level, &codes[level - 1].z_q)?.unstack();
                for s in 0..n {
                    if chosen[s].is_none() && rec[s].mse(&originals[s])? < d_th {
                        chosen[s] = Some(level);
                    }
                }
            }
        }
        chosen
            .into_iter()
            .enumerate()
            .map(|(s, c)| match c {
                None => Ok(CompressedSample::raw_from_tensor(&originals[s])),
                Some(level) => {
                    let m = self.level(level);
                    let per = m.indices_per_sample();
                    let grid = IndexGrid::pack(codes[level - 1].sample_indices(s, per), m.index_bits())?;
                    Ok(CompressedSample { level: level as u8, payload: Payload::Indices(grid) })
                }
            })
            .collect()
    }

    /// Single-sample [`AqmStack::compress_batch`] for a `(C, H, W)` input.
    pub fn adaptive_compress(&self, x: &Tensor, d_th: f64) -> Result<CompressedSample> {
        let batch = Tensor::stack(std::slice::from_ref(x))?;
        Ok(self.compress_batch(&batch, d_th)?.pop().expect("one sample"))
    }

    /// One update of every module on batch `x`.
    pub fn train_step(&mut self, x: &Tensor) -> Result<TrainStats> {
        self.check_batch(x)?;
        if self.modules.is_empty() {
            return Ok(TrainStats::default());
        }
        if self.config.coupled {
            return self.train_step_coupled(x);
        }
        // Inputs for every level come from the pre-update forward pass.
        let codes = self.encode_all(x)?;
        let mut inputs = Vec::with_capacity(self.modules.len());
        inputs.push(x.clone());
        for c in &codes[..codes.len() - 1] {
            inputs.push(c.z_q.clone());
        }
        let (beta, lr) = (self.config.beta, self.config.lr);
        let losses = if self.config.parallel {
            self.modules
                .par_iter_mut()
                .zip(inputs.par_iter())
                .enumerate()
                .map(|(i, (m, u))| m.train_step(u, beta, lr, i + 1))
                .collect::<Result<Vec<_>>>()?
        } else {
            self.modules
                .iter_mut()
                .zip(&inputs)
                .enumerate()
                .map(|(i, (m, u))| m.train_step(u, beta, lr, i + 1))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(TrainStats { losses })
    }

    /// End-to-end variant: gradients cross module boundaries and every level is
    /// trained to reconstruct the original input.
    fn train_step_coupled(&mut self, x: &Tensor) -> Result<TrainStats> {
        {
            let mut u = x.clone();
            for m in self.modules.iter_mut() {
                let z = m.encode(&u)?;
                m.init_codebooks(&z)?;
                u = m.quantize(&z)?.z_q;
            }
        }
        let mut tape = Tape::new();
        let bounds: Vec<_> = self
            .modules
            .iter()
            .map(|m| (m.encoder().params().bind(&mut tape), m.decoder().params().bind(&mut tape)))
            .collect();
        let input = tape.constant(x.clone());
        let mut cur = input;
        let mut level_terms = Vec::new();
        let mut ema_inputs = Vec::new();
        for (i, m) in self.modules.iter().enumerate() {
            let (z_e, st, codes) = m.forward_quantized(&mut tape, &bounds[i].0, cur)?;
            let target = tape.constant(codes.z_q.clone());
            let commit = tape.mse(z_e, target)?;
            let mut rec = st;
            for j in (0..=i).rev() {
                rec = self.modules[j].decoder().forward(&mut tape, &bounds[j].1, rec)?;
            }
            let rec_loss = tape.mse(rec, input)?;
            let commit = tape.scale(commit, self.config.beta);
            let term = tape.add(rec_loss, commit)?;
            level_terms.push(term);
            ema_inputs.push((tape.value(z_e).clone(), codes));
            cur = st;
        }
        let losses: Vec<f64> = level_terms.iter().map(|&t| tape.value(t).item()).collect();
        if let Some(level) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss { level: level + 1 });
        }
        let mut total = level_terms[0];
        for &t in &level_terms[1..] {
            total = tape.add(total, t)?;
        }
        if tape.is_tracked(total) {
            let mut grads = tape.backward(total)?;
            for (i, m) in self.modules.iter_mut().enumerate() {
                let cfg = AdamConfig::with_lr(m.config().lr.unwrap_or(self.config.lr));
                let ge = m.encoder().params().collect_grads(&bounds[i].0, &mut grads);
                let gd = m.decoder().params().collect_grads(&bounds[i].1, &mut grads);
                step_network(m.encoder_mut(), &ge, &cfg, i + 1)?;
                if m.decoder_trainable() {
                    step_network(m.decoder_mut(), &gd, &cfg, i + 1)?;
                }
            }
        }
        for (m, (z_e, codes)) in self.modules.iter_mut().zip(&ema_inputs) {
            m.ema_update(z_e, codes)?;
        }
        Ok(TrainStats { losses })
    }

    /// Freezes the codebooks of every level whose trailing-window streaming MSE has
    /// dropped below its threshold. Returns the newly frozen levels (1-based).
    pub fn maybe_freeze(&mut self, monitor: &FreezeMonitor) -> Vec<usize> {
        if !self.config.freeze {
            return Vec::new();
        }
        let mut frozen = Vec::new();
        for level in 1..=self.num_levels() {
            if self.level(level).is_frozen() {
                continue;
            }
            let Some(&threshold) = self.config.freeze_thresholds.get(level - 1) else { continue };
            if let Some(mean) = monitor.window_mean(level) {
                if mean < threshold {
                    self.level_mut(level).freeze();
                    frozen.push(level);
                }
            }
        }
        frozen
    }

    /// Bytes the serialized model occupies inside the storage budget.
    pub fn model_bytes(&self) -> usize {
        crate::streamio::checkpoint::model_bytes(self)
    }
}

/// Per-level history of pre-update streaming MSE.
#[derive(Clone, Debug, Default)]
pub struct FreezeMonitor {
    window: usize,
    history: Vec<Vec<f64>>,
}

impl FreezeMonitor {
    pub fn new(levels: usize, window: usize) -> Self {
        Self { window: window.max(1), history: vec![Vec::new(); levels] }
    }

    pub fn record(&mut self, level_mse: &[f64]) {
        for (h, &v) in self.history.iter_mut().zip(level_mse) {
            h.push(v);
        }
    }

    pub fn history(&self, level: usize) -> &[f64] {
        &self.history[level - 1]
    }

    /// Mean of the last `window` observations, once that many exist.
    pub fn window_mean(&self, level: usize) -> Option<f64> {
        let h = self.history.get(level - 1)?;
        if h.len() < self.window {
            return None;
        }
        Some(h[h.len() - self.window..].iter().sum::<f64>() / self.window as f64)
    }
}
