use rand::Rng;

use super::optim::{Bound, ParamSet};
use super::tape::{Conv2dSpec, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { weight: usize, bias: usize, spec: Conv2dSpec },
    Relu,
    Upsample2x,
}

/// A feed-forward stack of layers with its own parameters and optimizer state.
///
/// An empty network is the identity map.
#[derive(Clone, Debug, Default)]
pub struct Network {
    layers: Vec<Layer>,
    params: ParamSet,
}

impl Network {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn push_conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> &mut Self {
        let fan_in = in_ch * kernel * kernel;
        // Variance-preserving through ReLU: `±sqrt(6 / fan_in)`.
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let weight = self.params.add_uniform_bound(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound, rng);
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        self.layers.push(Layer::Conv { weight, bias, spec: Conv2dSpec { stride, pad: kernel / 2 } });
        self
    }

    pub fn push_relu(&mut self) -> &mut Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn push_upsample(&mut self) -> &mut Self {
        self.layers.push(Layer::Upsample2x);
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { weight, bias, spec } => {
                    tape.conv2d(x, bound.var(weight), Some(bound.var(bias)), spec)?
                }
                Layer::Relu => tape.relu(x),
                Layer::Upsample2x => tape.upsample2x(x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass without gradient tracking.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(x.clone());
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, input)?;
        Ok(tape.value(out).clone())
    }
}
