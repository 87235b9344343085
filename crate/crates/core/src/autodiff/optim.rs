use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters plus their Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    step: u64,
}

/// Per-call handles of a [`ParamSet`] registered on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        self.params.len() - 1
    }

    /// Uniform init in `±sqrt(1/fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> usize {
        self.add_uniform_bound(name, shape, (1.0 / fan_in.max(1) as f64).sqrt(), rng)
    }

    /// Uniform init in `±bound`.
    pub fn add_uniform_bound(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> usize {
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].name
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.value)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect() }
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect() }
    }

    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// One bias-corrected Adam update. Rejects the whole step if any gradient is non-finite.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{}`: {:?} vs {:?}",
                    p.name,
                    p.value.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (p, g) in self.params.iter_mut().zip(grads) {
            let (val, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
            for i in 0..g.numel() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                val[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Rounds every parameter to `f32` precision, the checkpoint storage format.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let g = Tensor::new(&[3], vec![0.5, -2.0, 1e-3]).unwrap();
        let cfg = AdamConfig::with_lr(0.01);
        ps.adam_step(std::slice::from_ref(&g), &cfg).unwrap();
        for (i, (&new, &old)) in ps.value(0).data().iter().zip(&[1.0, 2.0, 3.0]).enumerate() {
            let delta = new - old;
            let expect = -0.01 * g.data()[i].signum();
            assert!((delta - expect).abs() < 1e-6, "{i}: {delta} vs {expect}");
        }
        assert_eq!(ps.step_count(), 1);
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[2], vec![1.5, -0.5]).unwrap());
        ps.adam_step(&[Tensor::zeros(&[2])], &AdamConfig::default()).unwrap();
        assert_eq!(ps.value(0).data(), &[1.5, -0.5]);
        assert_eq!(ps.step_count(), 1);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = sum (w - c)^2, minimum at c.
        let target = [0.3, -0.7];
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let cfg = AdamConfig::with_lr(1e-2);
        for _ in 0..200 {
            let w = ps.value(0).data().to_vec();
            let g: Vec<f64> = w.iter().zip(&target).map(|(w, c)| 2.0 * (w - c)).collect();
            ps.adam_step(&[Tensor::new(&[2], g).unwrap()], &cfg).unwrap();
        }
        // Adam's step is ~lr while far away, so the first coordinate reaches its
        // target after ~30 steps and the second after ~70; 200 steps leaves ample room.
        let w = ps.value(0).data();
        for (w, c) in w.iter().zip(&target) {
            assert!((w - c).abs() < 1e-3, "{w} vs {c}");
        }
    }

    #[test]
    fn non_finite_gradient_rejects_whole_step() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::full(&[1], 1.0));
        ps.add("b", Tensor::full(&[1], 1.0));
        let err = ps
            .adam_step(&[Tensor::full(&[1], 1.0), Tensor::full(&[1], f64::NAN)], &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("`b`"));
        assert_eq!(ps.value(0).data(), &[1.0]);
        assert_eq!(ps.step_count(), 0);
    }
}
