use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};

fn d_lr() -> f64 {
    0.01
}
fn d_batch() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Mini-batch size for offline training.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lr: d_lr(), batch_size: d_batch() }
    }
}

/// Softmax linear classifier over flattened pixels.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    dim: usize,
    classes: usize,
    params: ParamSet,
    adam: AdamConfig,
}

impl LinearProbe {
    pub fn new(dim: usize, classes: usize, lr: f64, seed: u64) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::Config(format!("probe needs dim > 0 and >= 2 classes, got {dim}, {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let w = Tensor::from_fn(&[dim, classes], |_| rng.gen_range(-0.01..0.01));
        params.add("probe.w", w);
        params.add("probe.b", Tensor::zeros(&[classes]));
        Ok(Self { dim, classes, params, adam: AdamConfig::with_lr(lr) })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn flatten(&self, xs: &[&Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(xs.len() * self.dim);
        for x in xs {
            if x.numel() != self.dim {
                return Err(Error::Shape(format!("probe input of {} values, expected {}", x.numel(), self.dim)));
            }
            data.extend_from_slice(x.data());
        }
        Tensor::new(&[xs.len(), self.dim], data)
    }

    fn check_labels(&self, labels: &[u16]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                if (l as usize) < self.classes {
                    Ok(l as usize)
                } else {
                    Err(Error::InvalidLabel { label: l as usize, classes: self.classes })
                }
            })
            .collect()
    }

    /// One Adam step on a batch; returns the loss before the step.
    pub fn train_batch(&mut self, xs: &[&Tensor], labels: &[u16]) -> Result<f64> {
        if xs.len() != labels.len() {
            return Err(Error::Shape(format!("{} inputs with {} labels", xs.len(), labels.len())));
        }
        if xs.is_empty() {
            return Ok(0.0);
        }
        let y = self.check_labels(labels)?;
        let x = self.flatten(xs)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let xv = tape.constant(x);
        let h = tape.matmul(xv, b.var(0))?;
        let logits = tape.add_row_bias(h, b.var(1))?;
        let loss = tape.softmax_cross_entropy(logits, &y)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g = self.params.collect_grads(&b, &mut grads);
        self.params.adam_step(&g, &self.adam)?;
        Ok(value)
    }

    pub fn logits(&self, xs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let x = self.flatten(xs)?;
        let w = self.params.value(0).data();
        let bias = self.params.value(1).data();
        Ok(x.data()
            .chunks_exact(self.dim)
            .map(|row| {
                (0..self.classes)
                    .map(|c| bias[c] + row.iter().enumerate().map(|(i, v)| v * w[i * self.classes + c]).sum::<f64>())
                    .collect()
            })
            .collect())
    }

    /// Arg-max class; ties go to the smallest class id.
    pub fn predict(&self, xs: &[&Tensor]) -> Result<Vec<u16>> {
        Ok(self
            .logits(xs)?
            .iter()
            .map(|l| {
                let mut best = 0;
                for (c, &v) in l.iter().enumerate() {
                    if v > l[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect())
    }

    pub fn accuracy(&self, xs: &[Tensor], labels: &[u16]) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::Invalid("accuracy of an empty set".into()));
        }
        let refs: Vec<&Tensor> = xs.iter().collect();
        let pred = self.predict(&refs)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / xs.len() as f64)
    }

    /// iid training for `epochs` passes over `(xs, labels)` in shuffled mini-batches.
    pub fn fit_offline(
        &mut self,
        xs: &[Tensor],
        labels: &[u16],
        epochs: usize,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.check_labels(labels)?;
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size.max(1)) {
                let bx: Vec<&Tensor> = chunk.iter().map(|&i| &xs[i]).collect();
                let by: Vec<u16> = chunk.iter().map(|&i| labels[i]).collect();
                self.train_batch(&bx, &by)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_toy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Tensor> = (0..200)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                Tensor::new(&[2], vec![s + rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0)]).unwrap()
            })
            .collect();
        let ys: Vec<u16> = (0..200).map(|i| (i % 2) as u16).collect();
        let mut p = LinearProbe::new(2, 2, 0.05, 0).unwrap();
        p.fit_offline(&xs, &ys, 20, 20, &mut rng).unwrap();
        assert!(p.accuracy(&xs, &ys).unwrap() > 0.95);
    }

    #[test]
    fn single_class_training_predicts_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Tensor> = (0..50).map(|_| Tensor::from_fn(&[4], |_| rng.gen_range(0.0..1.0))).collect();
        let ys = vec![2u16; 50];
        let mut p = LinearProbe::new(4, 3, 0.05, 0).unwrap();
        p.fit_offline(&xs, &ys, 10, 10, &mut rng).unwrap();
        let refs: Vec<&Tensor> = xs.iter().collect();
        assert!(p.predict(&refs).unwrap().iter().all(|&c| c == 2));
    }

    #[test]
    fn label_outside_classes_rejected() {
        let mut p = LinearProbe::new(2, 2, 0.01, 0).unwrap();
        let x = Tensor::zeros(&[2]);
        assert!(matches!(p.train_batch(&[&x], &[5]), Err(Error::InvalidLabel { label: 5, classes: 2 })));
    }
}
