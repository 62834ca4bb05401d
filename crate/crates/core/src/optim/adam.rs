use serde::{Deserialize, Serialize};

use super::{buffers_to_entries, ensure_buffers, entries_to_buffers, Optimizer, StateEntries};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParameterSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "Adam needs lr ≥ 0, betas in [0, 1), eps > 0, weight_decay ≥ 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction and coupled L2 decay (`g ← g + λθ`).
#[derive(Clone, Debug)]
pub struct Adam<F> {
    config: AdamConfig,
    lr: F,
    step: u64,
    correction1: F,
    correction2: F,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            lr: F::of(config.lr),
            step: 0,
            correction1: F::one(),
            correction2: F::one(),
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Number of completed steps (shared by every parameter).
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl<F: Real> Optimizer<F> for Adam<F> {
    fn begin_step(&mut self, params: &ParameterSet<F>) -> Result<()> {
        ensure_buffers(&mut self.m, params)?;
        ensure_buffers(&mut self.v, params)?;
        self.step += 1;
        let t = self.step as i32;
        self.correction1 = F::one() - F::of(self.config.beta1).powi(t);
        self.correction2 = F::one() - F::of(self.config.beta2).powi(t);
        Ok(())
    }

    fn update(&mut self, index: usize, grad: &[F], target: &mut [F], decay_at: Option<&[F]>) {
        let b1 = F::of(self.config.beta1);
        let b2 = F::of(self.config.beta2);
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let eps = F::of(self.config.eps);
        let wd = F::of(self.config.weight_decay);
        let (c1, c2, lr) = (self.correction1, self.correction2, self.lr);
        let (m, v) = (&mut self.m[index], &mut self.v[index]);
        let step = |g: F, m: &mut F, v: &mut F| {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            lr * (*m / c1) / ((*v / c2).sqrt() + eps)
        };
        match decay_at {
            Some(theta) => {
                for ((((t, &g), m), v), &th) in target.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()).zip(theta) {
                    *t = *t - step(g + wd * th, m, v);
                }
            }
            None => {
                for (((t, &g), m), v) in target.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *t = *t - step(g + wd * *t, m, v);
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
        let mut out = buffers_to_entries("adam.m", &self.m, params);
        out.extend(buffers_to_entries("adam.v", &self.v, params));
        out.push(("adam.step".into(), Tensor::scalar(F::of(self.step as f64))));
        out
    }

    fn load_state_entries(&mut self, params: &ParameterSet<F>, entries: &[(String, Tensor<F>)]) -> Result<()> {
        self.m = entries_to_buffers("adam.m", params, entries)?;
        self.v = entries_to_buffers("adam.v", params, entries)?;
        self.step = entries
            .iter()
            .find(|(n, _)| n == "adam.step")
            .map(|(_, t)| t.item().map(|v| v.as_f64() as u64))
            .transpose()?
            .unwrap_or(0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Gradients;

    fn scalar_params(v: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::vector(&[v]).with_requires_grad(true)).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.7, -0.02] {
            let mut p = scalar_params(1.0);
            let mut opt = Adam::new(AdamConfig::new(0.01)).unwrap();
            opt.step(&mut p, &Gradients::from_tensors(vec![Tensor::vector(&[g])])).unwrap();
            let delta = p.tensor(0).data()[0] - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn zero_gradient_from_zero_moments_is_a_no_op() {
        let mut p = scalar_params(0.25);
        let mut opt = Adam::new(AdamConfig::new(0.01)).unwrap();
        opt.step(&mut p, &Gradients::from_tensors(vec![Tensor::vector(&[0.0])])).unwrap();
        assert_eq!(p.tensor(0).data()[0], 0.25);
    }

    /// Independent scalar Adam, written from the textbook update.
    fn reference_adam(mut theta: f64, steps: usize, lr: f64, grad: impl Fn(f64) -> f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = grad(theta);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        theta
    }

    #[test]
    fn three_steps_on_a_quadratic_match_the_reference() {
        let h = 3.0;
        let mut p = scalar_params(2.0);
        let mut opt = Adam::new(AdamConfig::new(0.1)).unwrap();
        for _ in 0..3 {
            let g = h * p.tensor(0).data()[0];
            opt.step(&mut p, &Gradients::from_tensors(vec![Tensor::vector(&[g])])).unwrap();
        }
        let expected = reference_adam(2.0, 3, 0.1, |x| h * x);
        assert!((p.tensor(0).data()[0] - expected).abs() < 1e-12);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn invalid_betas_are_rejected() {
        let mut c = AdamConfig::new(0.1);
        c.beta2 = 1.0;
        assert!(Adam::<f64>::new(c).is_err());
    }
}
