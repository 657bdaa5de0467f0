use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};

/// `y = x·W + b` with `W` of shape `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[input, output], input, rng)?;
        let bias = if bias { Some(store.add_uniform(format!("{name}.bias"), &[output], input, rng)?) } else { None };
        Ok(Self { weight, bias, input, output })
    }

    /// Weights and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.add_filled(format!("{name}.weight"), &[input, output], 0.0)?;
        let bias = Some(store.add_filled(format!("{name}.bias"), &[output], 0.0)?);
        Ok(Self { weight, bias, input, output })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add_filled(format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = store.add_filled(format!("{name}.beta"), &[channels], 0.0)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layernorm(x, p.var(self.gamma), p.var(self.beta))
    }
}
