use serde::{Deserialize, Serialize};

use super::{buffers_to_entries, ensure_buffers, entries_to_buffers, Optimizer, StateEntries};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParameterSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "SGD needs lr ≥ 0, momentum in [0, 1) and weight_decay ≥ 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Heavy-ball SGD with coupled L2 weight decay:
/// `v ← μv + g + λθ`, `θ ← θ − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    lr: F,
    momentum: F,
    weight_decay: F,
    config: SgdConfig,
    velocity: Vec<Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lr: F::of(config.lr),
            momentum: F::of(config.momentum),
            weight_decay: F::of(config.weight_decay),
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    pub fn velocity(&self, index: usize) -> Option<&[F]> {
        self.velocity.get(index).map(Vec::as_slice)
    }
}

impl<F: Real> Optimizer<F> for Sgd<F> {
    fn begin_step(&mut self, params: &ParameterSet<F>) -> Result<()> {
        ensure_buffers(&mut self.velocity, params)
    }

    fn update(&mut self, index: usize, grad: &[F], target: &mut [F], decay_at: Option<&[F]>) {
        let (mu, wd, lr) = (self.momentum, self.weight_decay, self.lr);
        let v = &mut self.velocity[index];
        match decay_at {
            Some(theta) => {
                for (((vi, &g), t), &th) in v.iter_mut().zip(grad).zip(target.iter_mut()).zip(theta) {
                    *vi = mu * *vi + g + wd * th;
                    *t = *t - lr * *vi;
                }
            }
            None => {
                for ((vi, &g), t) in v.iter_mut().zip(grad).zip(target.iter_mut()) {
                    *vi = mu * *vi + g + wd * *t;
                    *t = *t - lr * *vi;
                }
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.config.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.config.lr = lr;
        self.lr = F::of(lr);
    }

    fn state_entries(&self, params: &ParameterSet<F>) -> StateEntries<F> {
        buffers_to_entries("sgd.velocity", &self.velocity, params)
    }

    fn load_state_entries(&mut self, params: &ParameterSet<F>, entries: &[(String, Tensor<F>)]) -> Result<()> {
        self.velocity = entries_to_buffers("sgd.velocity", params, entries)?;
        Ok(())
    }
}
