use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_grads, NoiseFamily, NoiseSpec, Optimizer, Sgd, StateEntries};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Gradients, ParameterSet, Tensor};

/// Perturbed SGD: Gaussian noise is added to every gradient and never removed.
///
/// `θₜ = θₜ₋₁ − η(gₜ + εₜ)`, so the weight-space noise per step is `η·b`.
pub struct Psgd<F> {
    inner: Sgd<F>,
    noise: NoiseSpec,
    rng: ChaCha8Rng,
    scratch: Vec<F>,
}

fn require_gaussian(noise: &NoiseSpec) -> Result<()> {
    noise.validate()?;
    if noise.family != NoiseFamily::Gaussian {
        return Err(Error::Config(format!(
            "perturbed SGD injects Gaussian gradient noise; got {:?}",
            noise.family
        )));
    }
    Ok(())
}

impl<F: Real> Psgd<F> {
    pub fn new(inner: Sgd<F>, noise: NoiseSpec, seed: u64) -> Result<Self> {
        require_gaussian(&noise)?;
        Ok(Self {
            inner,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scratch: Vec::new(),
        })
    }

    pub fn inner(&self) -> &Sgd<F> {
        &self.inner
    }

    /// Replaces the noise source.
    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }
}

impl<F: Real> Optimizer<F> for Psgd<F> {
    fn begin_step(&mut self, params: &ParameterSet<F>) -> Result<()> {
        self.inner.begin_step(params)
    }

    fn update(&mut self, index: usize, grad: &[F], target: &mut [F], decay_at: Option<&[F]>) {
        self.scratch.resize(grad.len(), F::zero());
        self.noise.fill(&mut self.scratch, &mut self.rng);
        for (s, &g) in self.scratch.iter_mut().zip(grad) {
            *s = g + *s;
        }
        self.inner.update(index, &self.scratch, target, decay_at);
    }

    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    fn state_entries(&self, params: &ParameterSet<F>) -> StateEntries<F> {
        self.inner.state_entries(params)
    }

    fn load_state_entries(&mut self, params: &ParameterSet<F>, entries: &[(String, Tensor<F>)]) -> Result<()> {
        self.inner.load_state_entries(params, entries)
    }
}

/// One perturbed-SGD step with an explicit noise source.
pub fn psgd_step<F: Real, R: Rng + ?Sized>(
    sgd: &mut Sgd<F>,
    noise: &NoiseSpec,
    params: &mut ParameterSet<F>,
    grads: &Gradients<F>,
    rng: &mut R,
) -> Result<()> {
    require_gaussian(noise)?;
    check_grads(params, grads)?;
    sgd.begin_step(params)?;
    let mut noisy = Vec::new();
    for i in 0..params.len() {
        if !params.tensor(i).requires_grad() {
            continue;
        }
        let g = grads.get(i).expect("checked").data();
        noisy.resize(g.len(), F::zero());
        noise.fill(&mut noisy, rng);
        for (n, &gi) in noisy.iter_mut().zip(g) {
            *n = gi + *n;
        }
        sgd.update(i, &noisy, params.tensor_mut(i).data_mut(), None);
    }
    Ok(())
}
