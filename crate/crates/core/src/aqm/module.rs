use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LevelConfig;
use crate::autodiff::{AdamConfig, Network, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vq::Codebook;

/// One level's quantized output for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelCodes {
    /// `(N, D, Hh, Wh)` quantized latent.
    pub z_q: Tensor,
    /// Indices in `(n, codebook, y, x)` order.
    pub indices: Vec<u32>,
}

impl LevelCodes {
    /// Indices belonging to sample `n`.
    pub fn sample_indices(&self, n: usize, per_sample: usize) -> &[u32] {
        &self.indices[n * per_sample..(n + 1) * per_sample]
    }
}

/// Encoder, codebooks and decoder of one level.
#[derive(Clone, Debug)]
pub struct AqmModule {
    config: LevelConfig,
    input_dims: [usize; 3],
    latent_dims: [usize; 3],
    encoder: Network,
    decoder: Network,
    codebooks: Vec<Codebook>,
    rng: ChaCha8Rng,
    train_decoder: bool,
}

impl AqmModule {
    pub fn new(
        config: LevelConfig,
        input_dims: [usize; 3],
        latent_dims: [usize; 3],
        decay: f64,
        laplace_eps: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.latent_channels;
        let (mut encoder, mut decoder) = (Network::identity(), Network::identity());
        if !config.identity {
            let (k, mk) = (config.kernel, config.mix_kernel);
            let mut ch = input_dims[0];
            for s in 0..config.downsample {
                encoder.push_conv(&format!("enc.down{s}"), ch, d, k, 2, &mut rng).push_relu();
                ch = d;
            }
            if config.downsample == 0 {
                encoder.push_conv("enc.conv", ch, d, k, 1, &mut rng).push_relu();
            }
            encoder.push_conv("enc.mix", d, d, mk, 1, &mut rng);

            decoder.push_conv("dec.mix", d, d, mk, 1, &mut rng).push_relu();
            for s in 0..config.downsample {
                let last = s + 1 == config.downsample;
                let out = if last { input_dims[0] } else { d };
                decoder.push_upsample().push_conv(&format!("dec.up{s}"), d, out, k, 1, &mut rng);
                if !last {
                    decoder.push_relu();
                }
            }
            if config.downsample == 0 {
                decoder.push_conv("dec.conv", d, input_dims[0], k, 1, &mut rng);
            }
        }
        let per = d / config.num_codebooks;
        let codebooks = (0..config.num_codebooks)
            .map(|_| Codebook::new(config.codebook_size, per, decay, laplace_eps, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, input_dims, latent_dims, encoder, decoder, codebooks, rng, train_decoder: true })
    }

    pub fn config(&self) -> &LevelConfig {
        &self.config
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        self.latent_dims
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Network {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Network {
        &mut self.decoder
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut [Codebook] {
        &mut self.codebooks
    }

    pub fn is_frozen(&self) -> bool {
        self.codebooks.iter().all(|c| c.is_frozen())
    }

    pub fn freeze(&mut self) {
        self.codebooks.iter_mut().for_each(|c| c.freeze());
    }

    /// Holds the decoder fixed during later train steps (diagnostic).
    pub fn set_decoder_trainable(&mut self, trainable: bool) {
        self.train_decoder = trainable;
    }

    pub fn decoder_trainable(&self) -> bool {
        self.train_decoder
    }

    /// Indices stored per sample: `Nc * Hh * Wh`.
    pub fn indices_per_sample(&self) -> usize {
        self.config.num_codebooks * self.latent_dims[1] * self.latent_dims[2]
    }

    pub fn index_bits(&self) -> u32 {
        self.codebooks[0].index_bits()
    }

    /// Payload bits per sample: `Nc * Hh * Wh * ceil(log2 K)`.
    pub fn payload_bits(&self) -> usize {
        self.indices_per_sample() * self.index_bits() as usize
    }

    /// Scalar count of encoder and decoder parameters.
    pub fn param_count(&self) -> usize {
        self.encoder.params().numel() + self.decoder.params().numel()
    }

    pub fn codebook_elements(&self) -> usize {
        self.codebooks.iter().map(|c| c.size() * c.dim()).sum()
    }

    fn lr(&self, default: f64) -> f64 {
        self.config.lr.unwrap_or(default)
    }

    fn check_input(&self, u: &Tensor) -> Result<usize> {
        let s = u.shape();
        if s.len() != 4 || s[1..] != self.input_dims {
            return Err(Error::Shape(format!(
                "module expects (N, {}, {}, {}), got {:?}",
                self.input_dims[0], self.input_dims[1], self.input_dims[2], s
            )));
        }
        Ok(s[0])
    }

    pub fn encode(&self, u: &Tensor) -> Result<Tensor> {
        self.check_input(u)?;
        self.encoder.eval(u)
    }

    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor> {
        self.decoder.eval(z_q)
    }

    /// Gathers the vectors seen by codebook `c`, in `(n, y, x)` site order.
    fn gather(&self, z: &[f64], n: usize, c: usize) -> Vec<f64> {
        let [d, h, w] = self.latent_dims;
        let per = d / self.config.num_codebooks;
        let mut out = Vec::with_capacity(n * h * w * per);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for j in 0..per {
                        out.push(z[((b * d + c * per + j) * h + y) * w + x]);
                    }
                }
            }
        }
        out
    }

    fn scatter(&self, dst: &mut [f64], vectors: &[f64], n: usize, c: usize) {
        let [d, h, w] = self.latent_dims;
        let per = d / self.config.num_codebooks;
        let mut it = vectors.iter();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for j in 0..per {
                        dst[((b * d + c * per + j) * h + y) * w + x] = *it.next().expect("vector count");
                    }
                }
            }
        }
    }

    fn batch_of(&self, z: &Tensor) -> Result<usize> {
        let s = z.shape();
        if s.len() != 4 || s[1..] != self.latent_dims {
            return Err(Error::Shape(format!(
                "latent must be (N, {}, {}, {}), got {:?}",
                self.latent_dims[0], self.latent_dims[1], self.latent_dims[2], s
            )));
        }
        Ok(s[0])
    }

    /// Nearest-code quantization of an `(N, D, Hh, Wh)` encoder output.
    pub fn quantize(&self, z_e: &Tensor) -> Result<LevelCodes> {
        let n = self.batch_of(z_e)?;
        let nc = self.config.num_codebooks;
        let hw = self.latent_dims[1] * self.latent_dims[2];
        let mut z_q = vec![0.0; z_e.numel()];
        let mut indices = vec![0u32; n * nc * hw];
        for (c, cb) in self.codebooks.iter().enumerate() {
            let vecs = self.gather(z_e.data(), n, c);
            let (idx, q, _) = cb.quantize_flat(&vecs)?;
            self.scatter(&mut z_q, &q, n, c);
            for b in 0..n {
                indices[(b * nc + c) * hw..(b * nc + c + 1) * hw].copy_from_slice(&idx[b * hw..(b + 1) * hw]);
            }
        }
        Ok(LevelCodes { z_q: Tensor::new(z_e.shape(), z_q)?, indices })
    }

    /// Looks up stored indices for `n` samples.
    pub fn embed(&self, indices: &[u32], n: usize) -> Result<Tensor> {
        let nc = self.config.num_codebooks;
        let hw = self.latent_dims[1] * self.latent_dims[2];
        if indices.len() != n * nc * hw {
            return Err(Error::CorruptPayload(format!(
                "expected {} indices for {n} samples, got {}",
                n * nc * hw,
                indices.len()
            )));
        }
        let [d, h, w] = self.latent_dims;
        let mut z = vec![0.0; n * d * h * w];
        for (c, cb) in self.codebooks.iter().enumerate() {
            let mut idx = Vec::with_capacity(n * hw);
            for b in 0..n {
                idx.extend_from_slice(&indices[(b * nc + c) * hw..(b * nc + c + 1) * hw]);
            }
            let vecs = cb.embed(&idx)?;
            self.scatter(&mut z, &vecs, n, c);
        }
        Tensor::new(&[n, d, h, w], z)
    }

    /// Seeds uninitialised codebooks from encoder outputs.
    pub(crate) fn init_codebooks(&mut self, z_e: &Tensor) -> Result<()> {
        let n = self.batch_of(z_e)?;
        for c in 0..self.codebooks.len() {
            if !self.codebooks[c].is_initialized() && !self.codebooks[c].is_frozen() {
                let vecs = self.gather(z_e.data(), n, c);
                self.codebooks[c].init_from_samples(&vecs, &mut self.rng);
            }
        }
        Ok(())
    }

    pub(crate) fn ema_update(&mut self, z_e: &Tensor, codes: &LevelCodes) -> Result<()> {
        let n = self.batch_of(z_e)?;
        let nc = self.config.num_codebooks;
        let hw = self.latent_dims[1] * self.latent_dims[2];
        for c in 0..nc {
            let vecs = self.gather(z_e.data(), n, c);
            let mut idx = Vec::with_capacity(n * hw);
            for b in 0..n {
                idx.extend_from_slice(&codes.indices[(b * nc + c) * hw..(b * nc + c + 1) * hw]);
            }
            self.codebooks[c].ema_update(&vecs, &idx)?;
            self.codebooks[c].round_to_f32();
        }
        Ok(())
    }

    /// Records the encoder on `tape` and returns `(z_e var, straight-through var, codes)`.
    pub(crate) fn forward_quantized(
        &self,
        tape: &mut Tape,
        enc_bound: &crate::autodiff::Bound,
        input: Var,
    ) -> Result<(Var, Var, LevelCodes)> {
        let z_e = self.encoder.forward(tape, enc_bound, input)?;
        let codes = self.quantize(tape.value(z_e))?;
        let st = tape.straight_through(z_e, &codes.z_q)?;
        Ok((z_e, st, codes))
    }

    /// Greedy update on a detached input `u`: reconstruction of `u` through the
    /// straight-through code plus `beta` times the commitment term, one Adam step,
    /// then the codebook moving-average update. Returns the loss before the step.
    pub fn train_step(&mut self, u: &Tensor, beta: f64, default_lr: f64, level: usize) -> Result<f64> {
        self.check_input(u)?;
        let z_pre = self.encoder.eval(u)?;
        self.init_codebooks(&z_pre)?;

        let mut tape = Tape::new();
        let enc_b = self.encoder.params().bind(&mut tape);
        let dec_b = self.decoder.params().bind(&mut tape);
        let input = tape.constant(u.clone());
        let (z_e, st, codes) = self.forward_quantized(&mut tape, &enc_b, input)?;
        let recon = self.decoder.forward(&mut tape, &dec_b, st)?;
        let rec_loss = tape.mse(recon, input)?;
        let target = tape.constant(codes.z_q.clone());
        let commit = tape.mse(z_e, target)?;
        let commit = tape.scale(commit, beta);
        let loss = tape.add(rec_loss, commit)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { level });
        }
        let z_e_value = tape.value(z_e).clone();
        if tape.is_tracked(loss) {
            let mut grads = tape.backward(loss)?;
            let cfg = AdamConfig::with_lr(self.lr(default_lr));
            let ge = self.encoder.params().collect_grads(&enc_b, &mut grads);
            let gd = self.decoder.params().collect_grads(&dec_b, &mut grads);
            step_network(&mut self.encoder, &ge, &cfg, level)?;
            if self.train_decoder {
                step_network(&mut self.decoder, &gd, &cfg, level)?;
            }
        }
        self.ema_update(&z_e_value, &codes)?;
        Ok(loss_value)
    }
}

pub(crate) fn step_network(net: &mut Network, grads: &[Tensor], cfg: &AdamConfig, level: usize) -> Result<()> {
    if net.params().is_empty() || cfg.lr == 0.0 {
        return Ok(());
    }
    net.params_mut().adam_step(grads, cfg).map_err(|e| match e {
        Error::NonFiniteGradient(name) => Error::NonFiniteGradient(format!("level {level}: {name}")),
        other => other,
    })?;
    net.params_mut().round_to_f32();
    Ok(())
}
