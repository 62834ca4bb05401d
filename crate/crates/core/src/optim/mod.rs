//! First-order optimizers and the neural-variable wrapper.
//!
//! Every optimizer implements [`Optimizer`], whose core is
//! [`Optimizer::update`]: given one parameter's gradient it advances its own
//! buffers and subtracts the step from a target slice. Keeping the target
//! separate from the weights the step is computed at is what lets
//! [`Nvrm`] compute a step at perturbed weights and apply it to clean ones.

mod adam;
mod noise;
mod nvrm;
mod psgd;
mod sgd;

pub use adam::{Adam, AdamConfig};
pub use noise::{sample_noise, NoiseFamily, NoiseSpec};
pub use nvrm::Nvrm;
pub use psgd::{psgd_step, Psgd};
pub use sgd::{Sgd, SgdConfig};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Gradients, ParameterSet, Tensor};

/// Named tensors describing an optimizer's internal state, for checkpoints.
pub type StateEntries<F> = Vec<(String, Tensor<F>)>;

pub trait Optimizer<F: Real> {
    /// Prepares buffers and counters for one step over `params`.
    fn begin_step(&mut self, params: &ParameterSet<F>) -> Result<()>;

    /// Advances the buffers of parameter `index` with `grad` and subtracts
    /// the resulting step from `target`.
    ///
    /// Weight decay is taken at `decay_at` when given, otherwise at the
    /// current value of `target`.
    fn update(&mut self, index: usize, grad: &[F], target: &mut [F], decay_at: Option<&[F]>);

    fn learning_rate(&self) -> f64;

    fn set_learning_rate(&mut self, lr: f64);

    fn state_entries(&self, params: &ParameterSet<F>) -> StateEntries<F>;

    fn load_state_entries(&mut self, params: &ParameterSet<F>, entries: &[(String, Tensor<F>)]) -> Result<()>;

    /// One full update of every trainable parameter.
    fn step(&mut self, params: &mut ParameterSet<F>, grads: &Gradients<F>) -> Result<()> {
        check_grads(params, grads)?;
        self.begin_step(params)?;
        for i in 0..params.len() {
            if !params.tensor(i).requires_grad() {
                continue;
            }
            let g = grads.get(i).expect("checked").data();
            self.update(i, g, params.tensor_mut(i).data_mut(), None);
        }
        Ok(())
    }
}

/// Every trainable parameter must have a gradient of its own shape.
pub(crate) fn check_grads<F: Real>(params: &ParameterSet<F>, grads: &Gradients<F>) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape {
            name: "gradients".into(),
            detail: format!("{} gradient slots for {} parameters", grads.len(), params.len()),
        });
    }
    for i in 0..params.len() {
        if params.tensor(i).requires_grad() {
            grads.require(params, i)?;
        }
    }
    Ok(())
}

/// Lazily sizes one zeroed buffer per parameter.
pub(crate) fn ensure_buffers<F: Real>(buffers: &mut Vec<Vec<F>>, params: &ParameterSet<F>) -> Result<()> {
    if buffers.is_empty() {
        *buffers = params.tensors().iter().map(|t| vec![F::zero(); t.len()]).collect();
        return Ok(());
    }
    if buffers.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer holds state for {} parameters, got {}",
            buffers.len(),
            params.len()
        )));
    }
    for (i, (b, t)) in buffers.iter().zip(params.tensors()).enumerate() {
        if b.len() != t.len() {
            return Err(Error::State(format!(
                "state buffer for `{}` has {} values, parameter has {}",
                params.name(i),
                b.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

pub(crate) fn buffers_to_entries<F: Real>(prefix: &str, buffers: &[Vec<F>], params: &ParameterSet<F>) -> StateEntries<F> {
    buffers
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let t = Tensor::new(params.tensor(i).shape().to_vec(), b.clone()).expect("mirrors parameter");
            (format!("{prefix}.{}", params.name(i)), t)
        })
        .collect()
}

pub(crate) fn entries_to_buffers<F: Real>(
    prefix: &str,
    params: &ParameterSet<F>,
    entries: &[(String, Tensor<F>)],
) -> Result<Vec<Vec<F>>> {
    let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    if entries.iter().all(|(n, _)| !n.starts_with(prefix)) {
        return Ok(Vec::new());
    }
    params
        .iter()
        .map(|(name, t)| {
            let key = format!("{prefix}.{name}");
            let e = find(&key).ok_or_else(|| Error::State(format!("checkpoint lacks `{key}`")))?;
            if e.shape() != t.shape() {
                return Err(Error::State(format!("checkpoint entry `{key}` has shape {:?}", e.shape())));
            }
            Ok(e.data().to_vec())
        })
        .collect()
}

/// Step-decay schedule: the learning rate is divided by `factor` every `period` epochs.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepDecay {
    pub initial: f64,
    pub period: Option<usize>,
    #[serde(default = "ten")]
    pub factor: f64,
}

fn ten() -> f64 {
    10.0
}

impl StepDecay {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            period: None,
            factor: 10.0,
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn at(&self, epoch: usize) -> f64 {
        match self.period {
            Some(p) if p > 0 => self.initial / self.factor.powi((epoch / p) as i32),
            _ => self.initial,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_divides_by_ten_each_period() {
        let s = StepDecay {
            initial: 0.1,
            period: Some(100),
            factor: 10.0,
        };
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(99), 0.1);
        assert!((s.at(100) - 0.01).abs() < 1e-15);
        assert!((s.at(250) - 0.001).abs() < 1e-15);
        assert_eq!(StepDecay::constant(0.3).at(1000), 0.3);
    }
}
