//! Neural variable risk minimization around any inner optimizer.
//!
//! The model's stored weights are always `θ̂ₜ = θₜ + εₜ`: clean weights plus
//! the current virtual perturbation. Gradients are taken at `θ̂ₜ₋₁`, the inner
//! optimizer's step is applied to the clean weights, a fresh `εₜ` is drawn
//! and the stored weights become `θₜ + εₜ`. This is the
//! `θ ← θ − ηg;  θ ← θ + εₜ − εₜ₋₁` update, with the clean weights kept
//! alongside so that removing the perturbation is exact rather than
//! accumulating rounding over thousands of `+εₜ − εₜ₋₁` corrections.
//!
//! Lifecycle: [`Nvrm::attach`] applies `ε₀ = 0`, [`Nvrm::step`] runs once per
//! minibatch, [`Nvrm::finalize`] removes `ε_T`. In between,
//! [`Nvrm::with_clean_weights`] evaluates the de-noised model without
//! disturbing training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_grads, NoiseSpec, Optimizer, StateEntries};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Gradients, ParameterSet, Tensor};

pub struct Nvrm<F: Real, O> {
    inner: O,
    noise: NoiseSpec,
    rng: ChaCha8Rng,
    clean: Vec<Vec<F>>,
    perturbation: Vec<Vec<F>>,
    perturbed: bool,
    steps: u64,
}

impl<F: Real, O: Optimizer<F>> Nvrm<F, O> {
    /// Wraps `inner`; perturbations are drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(inner: O, noise: NoiseSpec, seed: u64) -> Result<Self> {
        Self::with_rng(inner, noise, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(inner: O, noise: NoiseSpec, rng: ChaCha8Rng) -> Result<Self> {
        noise.validate()?;
        Ok(Self {
            inner,
            noise,
            rng,
            clean: Vec::new(),
            perturbation: Vec::new(),
            perturbed: false,
            steps: 0,
        })
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut O {
        &mut self.inner
    }

    pub fn noise(&self) -> NoiseSpec {
        self.noise
    }

    pub fn is_perturbed(&self) -> bool {
        self.perturbed
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Current `εₜ` of parameter `index` (empty for frozen parameters).
    pub fn perturbation(&self, index: usize) -> &[F] {
        &self.perturbation[index]
    }

    /// Clean weights `θₜ` of parameter `index` (empty for frozen parameters).
    pub fn clean_weights(&self, index: usize) -> &[F] {
        &self.clean[index]
    }

    /// Starts a perturbed phase with `ε₀ = 0`: the stored weights are taken
    /// as the clean weights.
    pub fn attach(&mut self, params: &ParameterSet<F>) -> Result<()> {
        if self.perturbed {
            return Err(Error::State("attach called while a perturbation is active; finalize first".into()));
        }
        self.clean = params
            .tensors()
            .iter()
            .map(|t| if t.requires_grad() { t.data().to_vec() } else { Vec::new() })
            .collect();
        self.perturbation = self.clean.iter().map(|c| vec![F::zero(); c.len()]).collect();
        self.perturbed = true;
        Ok(())
    }

    fn check_attached(&self, params: &ParameterSet<F>, what: &str) -> Result<()> {
        if !self.perturbed {
            return Err(Error::State(format!(
                "{what} requires an active perturbation; call attach (ε₀ = 0) first"
            )));
        }
        if self.clean.len() != params.len() {
            return Err(Error::State(format!(
                "attached to {} parameters, called with {}",
                self.clean.len(),
                params.len()
            )));
        }
        for (i, c) in self.clean.iter().enumerate() {
            let t = params.tensor(i);
            if t.requires_grad() && c.len() != t.len() {
                return Err(Error::State(format!(
                    "parameter `{}` was not trainable (or had another size) when attached",
                    params.name(i)
                )));
            }
        }
        Ok(())
    }

    /// One iteration: inner update of the clean weights using gradients
    /// taken at the stored weights, then `stored ← clean + εₜ`.
    pub fn step(&mut self, params: &mut ParameterSet<F>, grads: &Gradients<F>) -> Result<()> {
        self.check_attached(params, "step")?;
        check_grads(params, grads)?;
        self.inner.begin_step(params)?;
        for i in 0..params.len() {
            if !params.tensor(i).requires_grad() {
                continue;
            }
            let g = grads.get(i).expect("checked").data();
            let stored = params.tensor_mut(i).data_mut();
            self.inner.update(i, g, &mut self.clean[i], Some(stored));
            let eps = &mut self.perturbation[i];
            self.noise.fill(eps, &mut self.rng);
            if self.noise.is_zero() {
                stored.copy_from_slice(&self.clean[i]);
            } else {
                for ((s, &c), &e) in stored.iter_mut().zip(&self.clean[i]).zip(eps.iter()) {
                    *s = c + e;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Removes the current perturbation: `stored ← clean`, `ε ← 0`.
    pub fn finalize(&mut self, params: &mut ParameterSet<F>) -> Result<()> {
        if !self.perturbed {
            return Err(Error::State("finalize called twice (no active perturbation)".into()));
        }
        self.check_attached(params, "finalize")?;
        for (i, c) in self.clean.iter().enumerate() {
            if !c.is_empty() {
                params.tensor_mut(i).data_mut().copy_from_slice(c);
            }
        }
        self.perturbation.iter_mut().for_each(|e| e.iter_mut().for_each(|v| *v = F::zero()));
        self.perturbed = false;
        Ok(())
    }

    /// Runs `eval` on the de-noised weights, then restores the stored
    /// weights bit for bit.
    ///
    /// `eval` only sees a shared reference, so it cannot modify the weights.
    pub fn with_clean_weights<R>(
        &mut self,
        params: &mut ParameterSet<F>,
        eval: impl FnOnce(&ParameterSet<F>) -> R,
    ) -> Result<R> {
        self.check_attached(params, "with_clean_weights")?;
        self.swap_clean(params);
        let out = eval(params);
        self.swap_clean(params);
        Ok(out)
    }

    fn swap_clean(&mut self, params: &mut ParameterSet<F>) {
        for (i, c) in self.clean.iter_mut().enumerate() {
            if !c.is_empty() {
                params.tensor_mut(i).data_mut().swap_with_slice(c);
            }
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    /// Clean weights, current perturbation, RNG position and inner state.
    pub fn state_entries(&self, params: &ParameterSet<F>) -> StateEntries<F> {
        let mut out = self.inner.state_entries(params);
        for (i, (c, e)) in self.clean.iter().zip(&self.perturbation).enumerate() {
            if c.is_empty() {
                continue;
            }
            let shape = params.tensor(i).shape().to_vec();
            out.push((format!("nvrm.clean.{}", params.name(i)), Tensor::new(shape.clone(), c.clone()).expect("shape")));
            out.push((format!("nvrm.eps.{}", params.name(i)), Tensor::new(shape, e.clone()).expect("shape")));
        }
        let flags = [self.perturbed as u8 as f64, self.steps as f64];
        out.push(("nvrm.flags".into(), Tensor::vector(&flags.map(F::of))));
        out.push(("nvrm.rng".into(), Tensor::vector(&encode_rng(&self.rng))));
        out
    }

    /// Restores state written by [`Nvrm::state_entries`]; `params` must hold
    /// the stored (perturbed) weights from the same checkpoint.
    pub fn load_state_entries(&mut self, params: &ParameterSet<F>, entries: &[(String, Tensor<F>)]) -> Result<()> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        self.inner.load_state_entries(params, entries)?;
        let flags = find("nvrm.flags").ok_or_else(|| Error::State("checkpoint lacks `nvrm.flags`".into()))?;
        self.perturbed = flags.data()[0] != F::zero();
        self.steps = flags.data()[1].as_f64() as u64;
        let rng = find("nvrm.rng").ok_or_else(|| Error::State("checkpoint lacks `nvrm.rng`".into()))?;
        self.rng = decode_rng(rng.data())?;
        self.clean.clear();
        self.perturbation.clear();
        for (name, t) in params.iter() {
            match (find(&format!("nvrm.clean.{name}")), find(&format!("nvrm.eps.{name}"))) {
                (Some(c), Some(e)) => {
                    if c.shape() != t.shape() || e.shape() != t.shape() {
                        return Err(Error::State(format!("checkpoint state for `{name}` has the wrong shape")));
                    }
                    self.clean.push(c.data().to_vec());
                    self.perturbation.push(e.data().to_vec());
                }
                _ if t.requires_grad() && self.perturbed => {
                    return Err(Error::State(format!("checkpoint lacks NVRM state for `{name}`")));
                }
                _ => {
                    self.clean.push(Vec::new());
                    self.perturbation.push(Vec::new());
                }
            }
        }
        Ok(())
    }
}

// ChaCha position as 16-bit chunks so it survives an f32 round trip.
fn encode_rng<F: Real>(rng: &ChaCha8Rng) -> Vec<F> {
    let mut out: Vec<F> = rng.get_seed().iter().map(|&b| F::of(b as f64)).collect();
    let stream = rng.get_stream();
    out.extend((0..4).map(|k| F::of(((stream >> (16 * k)) & 0xffff) as f64)));
    let pos = rng.get_word_pos();
    out.extend((0..8).map(|k| F::of(((pos >> (16 * k)) & 0xffff) as f64)));
    out
}

fn decode_rng<F: Real>(v: &[F]) -> Result<ChaCha8Rng> {
    if v.len() != 44 {
        return Err(Error::State(format!("RNG state has {} values, expected 44", v.len())));
    }
    let mut seed = [0u8; 32];
    for (s, x) in seed.iter_mut().zip(&v[..32]) {
        *s = x.as_f64() as u8;
    }
    let stream = (0..4).fold(0u64, |acc, k| acc | ((v[32 + k].as_f64() as u64) << (16 * k)));
    let pos = (0..8).fold(0u128, |acc, k| acc | ((v[36 + k].as_f64() as u128) << (16 * k)));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Adam, AdamConfig, Sgd, SgdConfig};
    use rand::Rng;

    fn params() -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.push("a", Tensor::vector(&[0.5, -1.0, 2.0]).with_requires_grad(true)).unwrap();
        p.push("b", Tensor::vector(&[3.0, 0.25]).with_requires_grad(true)).unwrap();
        p
    }

    fn quad_grads(p: &ParameterSet<f64>) -> Gradients<f64> {
        Gradients::from_tensors(p.tensors().iter().map(|t| t.map(|v| 2.0 * v)).collect())
    }

    #[test]
    fn step_before_attach_is_a_state_error() {
        let mut p = params();
        let mut opt = Nvrm::new(Sgd::new(SgdConfig::new(0.1)).unwrap(), NoiseSpec::gaussian(0.1), 0).unwrap();
        let g = quad_grads(&p);
        assert!(matches!(opt.step(&mut p, &g), Err(Error::State(_))));
    }

    #[test]
    fn finalize_right_after_attach_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Nvrm::new(Sgd::new(SgdConfig::new(0.1)).unwrap(), NoiseSpec::gaussian(0.1), 0).unwrap();
        opt.attach(&p).unwrap();
        opt.finalize(&mut p).unwrap();
        assert!(p.bit_identical(&before));
    }

    #[test]
    fn double_finalize_is_a_state_error() {
        let mut p = params();
        let mut opt = Nvrm::new(Sgd::new(SgdConfig::new(0.1)).unwrap(), NoiseSpec::gaussian(0.1), 0).unwrap();
        opt.attach(&p).unwrap();
        opt.finalize(&mut p).unwrap();
        assert!(matches!(opt.finalize(&mut p), Err(Error::State(_))));
    }

    #[test]
    fn finalize_after_one_step_removes_eps_one() {
        let mut p = params();
        let mut opt = Nvrm::new(Sgd::new(SgdConfig::new(0.1)).unwrap(), NoiseSpec::gaussian(0.1), 3).unwrap();
        opt.attach(&p).unwrap();
        let g = quad_grads(&p);
        opt.step(&mut p, &g).unwrap();
        let stored = p.clone();
        let eps: Vec<Vec<f64>> = (0..2).map(|i| opt.perturbation(i).to_vec()).collect();
        let clean: Vec<Vec<f64>> = (0..2).map(|i| opt.clean_weights(i).to_vec()).collect();
        opt.finalize(&mut p).unwrap();
        for i in 0..2 {
            assert_eq!(p.tensor(i).data(), clean[i].as_slice());
            for j in 0..clean[i].len() {
                let shift = stored.tensor(i).data()[j] - p.tensor(i).data()[j];
                assert!((shift - eps[i][j]).abs() <= 1e-15, "shift {shift} vs eps {}", eps[i][j]);
            }
            assert!(opt.perturbation(i).iter().all(|&v| v == 0.0));
        }
        assert!(!opt.is_perturbed());
    }

    #[test]
    fn zero_noise_matches_plain_sgd_bitwise() {
        let mut a = params();
        let mut b = params();
        let mut plain = Sgd::new(SgdConfig::new(0.05).momentum(0.9).weight_decay(1e-3)).unwrap();
        let mut nv = Nvrm::new(Sgd::new(SgdConfig::new(0.05).momentum(0.9).weight_decay(1e-3)).unwrap(), NoiseSpec::none(), 1).unwrap();
        nv.attach(&b).unwrap();
        for _ in 0..20 {
            let ga = quad_grads(&a);
            plain.step(&mut a, &ga).unwrap();
            let gb = quad_grads(&b);
            nv.step(&mut b, &gb).unwrap();
            assert!(a.bit_identical(&b));
        }
    }

    #[test]
    fn zero_noise_matches_plain_adam_bitwise() {
        let mut a = params();
        let mut b = params();
        let cfg = AdamConfig::new(0.01).weight_decay(1e-4);
        let mut plain = Adam::new(cfg).unwrap();
        let mut nv = Nvrm::new(Adam::new(cfg).unwrap(), NoiseSpec::none(), 1).unwrap();
        nv.attach(&b).unwrap();
        for _ in 0..20 {
            let ga = quad_grads(&a);
            plain.step(&mut a, &ga).unwrap();
            let gb = quad_grads(&b);
            nv.step(&mut b, &gb).unwrap();
        }
        nv.finalize(&mut b).unwrap();
        assert!(a.bit_identical(&b));
    }

    #[test]
    fn zero_lr_then_finalize_restores_initial_weights_exactly() {
        let mut p = params();
        let init = p.clone();
        let mut opt = Nvrm::new(Sgd::new(SgdConfig::new(0.0).momentum(0.9).weight_decay(1e-4)).unwrap(), NoiseSpec::gaussian(0.05), 11).unwrap();
        opt.attach(&p).unwrap();
        for _ in 0..50 {
            let g = quad_grads(&p);
            opt.step(&mut p, &g).unwrap();
        }
        assert!(!p.bit_identical(&init));
        opt.finalize(&mut p).unwrap();
        assert!(p.bit_identical(&init));
    }

    #[test]
    fn with_clean_weights_sees_stored_minus_eps_and_restores() {
        let mut p = params();
        let mut opt = Nvrm::new(Sgd::new(SgdConfig::new(0.1)).unwrap(), NoiseSpec::gaussian(0.2), 5).unwrap();
        opt.attach(&p).unwrap();
        let g = quad_grads(&p);
        opt.step(&mut p, &g).unwrap();
        let stored = p.clone();
        let seen = opt.with_clean_weights(&mut p, |clean| clean.clone()).unwrap();
        assert!(p.bit_identical(&stored));
        for i in 0..2 {
            for j in 0..p.tensor(i).len() {
                let expected = stored.tensor(i).data()[j] - opt.perturbation(i)[j];
                assert!((seen.tensor(i).data()[j] - expected).abs() < 1e-15);
            }
        }
        let again = opt.with_clean_weights(&mut p, |clean| clean.clone()).unwrap();
        assert!(seen.bit_identical(&again));
    }

    #[test]
    fn frozen_parameters_are_never_perturbed() {
        let mut p = params();
        p.get_mut("b").unwrap().set_requires_grad(false);
        let frozen = p.get("b").unwrap().clone();
        let mut opt = Nvrm::new(Adam::new(AdamConfig::new(0.1)).unwrap(), NoiseSpec::gaussian(0.5), 2).unwrap();
        opt.attach(&p).unwrap();
        for _ in 0..5 {
            let mut g = quad_grads(&p);
            g.remove(1);
            opt.step(&mut p, &g).unwrap();
        }
        opt.finalize(&mut p).unwrap();
        assert_eq!(p.get("b").unwrap(), &frozen);
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let mut p = params();
        let mut opt = Nvrm::new(Adam::new(AdamConfig::new(0.05)).unwrap(), NoiseSpec::gaussian(0.1), 8).unwrap();
        opt.attach(&p).unwrap();
        for _ in 0..3 {
            let g = quad_grads(&p);
            opt.step(&mut p, &g).unwrap();
        }
        let entries = opt.state_entries(&p);
        let mut p2 = p.clone();
        let mut resumed = Nvrm::new(Adam::new(AdamConfig::new(0.05)).unwrap(), NoiseSpec::gaussian(0.1), 999).unwrap();
        resumed.load_state_entries(&p2, &entries).unwrap();
        for _ in 0..3 {
            let g = quad_grads(&p);
            opt.step(&mut p, &g).unwrap();
            let g2 = quad_grads(&p2);
            resumed.step(&mut p2, &g2).unwrap();
        }
        opt.finalize(&mut p).unwrap();
        resumed.finalize(&mut p2).unwrap();
        assert!(p.bit_identical(&p2));
    }

    #[test]
    fn rng_encoding_round_trips_through_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        rng.set_stream(0xdead_beef_1234);
        let _: u64 = rng.random();
        let enc: Vec<f32> = encode_rng(&rng);
        let mut dec = decode_rng(&enc).unwrap();
        assert_eq!(rng.random::<u64>(), dec.random::<u64>());
    }
}
