//! Flatness and generalization measures.
//!
//! The neural variable risk of weights `θ` is the expected loss under an
//! i.i.d. weight perturbation, `L_NV(θ) = E[L(θ + ε)]`. Its gap to the clean
//! loss, `δ = |L_NV − L|`, is the regional flatness that NVRM trains for, and
//! it enters the PAC-Bayes bound together with the KL divergence between the
//! perturbed posterior `N(θ, b²I)` and a prior `N(0, σ²I)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Fcn;
use crate::optim::NoiseSpec;
use crate::real::Real;
use crate::tensor::ParameterSet;
use crate::train::evaluate;

/// Monte-Carlo estimate of the neural variable risk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NvEstimate {
    pub b: f64,
    /// Mean loss over the finite perturbed samples.
    pub perturbed_loss: f64,
    pub clean_loss: f64,
    /// `|perturbed_loss − clean_loss|`.
    pub delta: f64,
    /// Samples that entered the mean.
    pub num_samples: usize,
    /// Sample standard deviation over `√num_samples`.
    pub stderr: f64,
    /// Perturbed samples dropped because the loss was not finite.
    pub non_finite: usize,
}

/// [`NvEstimate`] for an arbitrary loss over the parameters.
pub fn estimate_nvr_with<F: Real, R: Rng + ?Sized>(
    params: &ParameterSet<F>,
    spec: &NoiseSpec,
    num_samples: usize,
    rng: &mut R,
    mut loss: impl FnMut(&ParameterSet<F>) -> Result<f64>,
) -> Result<NvEstimate> {
    spec.validate()?;
    if num_samples < 2 {
        return Err(Error::Config(format!("need at least 2 perturbation samples, got {num_samples}")));
    }
    let clean_loss = loss(params)?;
    let mut probe = params.clone();
    let mut values = Vec::with_capacity(num_samples);
    let mut non_finite = 0;
    for _ in 0..num_samples {
        for (dst, src) in probe.tensors_mut().iter_mut().zip(params.tensors()) {
            let d = dst.data_mut();
            spec.fill(d, rng);
            for (v, &s) in d.iter_mut().zip(src.data()) {
                *v += s;
            }
        }
        let l = loss(&probe)?;
        if l.is_finite() {
            values.push(l);
        } else {
            non_finite += 1;
        }
    }
    let n = values.len();
    if n < 2 {
        return Err(Error::NonFinite {
            name: "perturbed loss".into(),
            index: non_finite,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(NvEstimate {
        b: spec.b,
        perturbed_loss: mean,
        clean_loss,
        delta: (mean - clean_loss).abs(),
        num_samples: n,
        stderr: (var / n as f64).sqrt(),
        non_finite,
    })
}

/// Neural variable risk of a classifier: mean full-dataset cross-entropy
/// under `num_samples` independent weight perturbations.
pub fn estimate_nvr<F: Real, R: Rng + ?Sized>(
    model: &Fcn,
    params: &ParameterSet<F>,
    data: &Dataset<F>,
    head: usize,
    spec: &NoiseSpec,
    num_samples: usize,
    rng: &mut R,
) -> Result<NvEstimate> {
    estimate_nvr_with(params, spec, num_samples, rng, |p| Ok(evaluate(model, p, data, head)?.loss))
}

/// `δ` of Gaussian `(b, δ)`-neural variability with a 3-standard-error half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NvDelta {
    pub delta: f64,
    pub half_width: f64,
}

pub fn estimate_nv_delta<F: Real, R: Rng + ?Sized>(
    model: &Fcn,
    params: &ParameterSet<F>,
    data: &Dataset<F>,
    head: usize,
    b: f64,
    num_samples: usize,
    rng: &mut R,
) -> Result<NvDelta> {
    let e = estimate_nvr(model, params, data, head, &NoiseSpec::gaussian(b), num_samples, rng)?;
    Ok(NvDelta {
        delta: e.delta,
        half_width: 3.0 * e.stderr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub scale: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
}

/// Test accuracy under isotropic Gaussian weight noise, per noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub trials: usize,
    pub points: Vec<RobustnessPoint>,
}

/// Perturbs a copy of `params` `trials` times per scale; `params` itself is
/// only read.
pub fn robustness_sweep<F: Real, R: Rng + ?Sized>(
    model: &Fcn,
    params: &ParameterSet<F>,
    test: &Dataset<F>,
    head: usize,
    scales: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<RobustnessCurve> {
    if trials == 0 {
        return Err(Error::Config("robustness sweep needs at least one trial".into()));
    }
    if scales.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!("noise scales must be strictly increasing, got {scales:?}")));
    }
    let mut probe = params.clone();
    let mut points = Vec::with_capacity(scales.len());
    for &scale in scales {
        let spec = NoiseSpec::gaussian(scale);
        spec.validate()?;
        let mut accuracies = Vec::with_capacity(trials);
        for _ in 0..trials {
            for (dst, src) in probe.tensors_mut().iter_mut().zip(params.tensors()) {
                let d = dst.data_mut();
                spec.fill(d, rng);
                for (v, &s) in d.iter_mut().zip(src.data()) {
                    *v += s;
                }
            }
            accuracies.push(evaluate(model, &probe, test, head)?.accuracy);
        }
        let mean = accuracies.iter().sum::<f64>() / trials as f64;
        let std = if trials > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
        } else {
            0.0
        };
        points.push(RobustnessPoint {
            scale,
            mean_accuracy: mean,
            std_accuracy: std,
            accuracies,
        });
    }
    Ok(RobustnessCurve { trials, points })
}

/// `KL(N(θ*, b²I) ‖ N(0, σ²I)) = Σᵢ [ln(σ/b) + (b² + θ*ᵢ²)/(2σ²) − ½]`.
pub fn kl_gaussian(theta: impl IntoIterator<Item = f64>, b: f64, sigma: f64) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::OutOfRange(format!("KL needs b > 0 and sigma > 0, got b = {b}, sigma = {sigma}")));
    }
    let s2 = 2.0 * sigma * sigma;
    let per_coord = (sigma / b).ln() + b * b / s2 - 0.5;
    let (mut n, mut sq) = (0usize, 0.0);
    for t in theta {
        n += 1;
        sq += t * t;
    }
    Ok(n as f64 * per_coord + sq / s2)
}

/// [`kl_gaussian`] over every scalar of a parameter set.
pub fn kl_gaussian_posterior_prior<F: Real>(theta_star: &ParameterSet<F>, b: f64, sigma: f64) -> Result<f64> {
    kl_gaussian(theta_star.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.as_f64())), b, sigma)
}

/// Prior standard deviation implied by an L2 coefficient, `σ = 1/√λ`.
pub fn prior_sigma_from_weight_decay(weight_decay: f64) -> Result<f64> {
    if !(weight_decay > 0.0) {
        return Err(Error::OutOfRange(format!("weight decay must be positive to define a prior, got {weight_decay}")));
    }
    Ok(1.0 / weight_decay.sqrt())
}

/// `L̂ + 4·√((KL + ln(2m/Δ)) / m) + δ`.
pub fn pac_bayes_bound(empirical_risk: f64, kl: f64, m: usize, confidence_delta: f64, nv_delta: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::OutOfRange("PAC-Bayes bound needs m ≥ 1".into()));
    }
    if !(confidence_delta > 0.0 && confidence_delta < 1.0) {
        return Err(Error::OutOfRange(format!("confidence Δ must lie in (0, 1), got {confidence_delta}")));
    }
    if !(kl >= 0.0) {
        return Err(Error::OutOfRange(format!("KL must be non-negative, got {kl}")));
    }
    if !(nv_delta >= 0.0) {
        return Err(Error::OutOfRange(format!("δ must be non-negative, got {nv_delta}")));
    }
    let m = m as f64;
    Ok(empirical_risk + 4.0 * ((kl + (2.0 * m / confidence_delta).ln()) / m).sqrt() + nv_delta)
}

/// Training accuracy minus test accuracy.
pub fn generalization_gap(train_accuracy: f64, test_accuracy: f64) -> f64 {
    train_accuracy - test_accuracy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::NoiseFamily;
    use crate::tensor::Tensor;
    use crate::train::rng_for;

    fn theta(values: &[f64]) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.push("theta", Tensor::vector(values)).unwrap();
        p
    }

    fn quadratic(h: &[f64]) -> impl Fn(&ParameterSet<f64>) -> Result<f64> + '_ {
        move |p| Ok(0.5 * p.tensor(0).data().iter().zip(h).map(|(t, h)| h * t * t).sum::<f64>())
    }

    #[test]
    fn zero_noise_has_no_gap() {
        let h = [1.0, 2.0];
        let e = estimate_nvr_with(&theta(&[0.3, 0.4]), &NoiseSpec::none(), 10, &mut rng_for(0, 0), quadratic(&h)).unwrap();
        assert_eq!(e.delta, 0.0);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.perturbed_loss, e.clean_loss);
    }

    #[test]
    fn quadratic_nvr_matches_half_variance_trace() {
        let h = [1.0, 3.0, 0.5, 2.0];
        let tr: f64 = h.iter().sum();
        let p = theta(&[0.2, -0.1, 0.4, 0.0]);
        for family in [NoiseFamily::Gaussian, NoiseFamily::Laplace, NoiseFamily::Uniform] {
            let spec = NoiseSpec::new(family, 0.1);
            let e = estimate_nvr_with(&p, &spec, 20_000, &mut rng_for(1, 0), quadratic(&h)).unwrap();
            let expected = e.clean_loss + 0.5 * spec.variance() * tr;
            assert!((e.perturbed_loss - expected).abs() < 3.0 * e.stderr, "{family:?}");
        }
    }

    #[test]
    fn linear_loss_is_unbiased() {
        let c = [0.5, -2.0, 1.0];
        let p = theta(&[1.0, 1.0, 1.0]);
        let lin = |q: &ParameterSet<f64>| Ok(q.tensor(0).data().iter().zip(&c).map(|(t, c)| t * c).sum::<f64>());
        let e = estimate_nvr_with(&p, &NoiseSpec::gaussian(0.3), 5000, &mut rng_for(2, 0), lin).unwrap();
        assert!(e.delta < 3.0 * e.stderr);
    }

    #[test]
    fn identity_hessian_delta_is_one_hundredth() {
        let e = estimate_nvr_with(&theta(&[0.0, 0.0]), &NoiseSpec::gaussian(0.1), 50_000, &mut rng_for(3, 0), quadratic(&[1.0, 1.0]))
            .unwrap();
        assert!((e.delta - 0.01).abs() < 3.0 * e.stderr);
    }

    #[test]
    fn non_finite_samples_are_counted_and_dropped() {
        let mut calls = 0;
        let e = estimate_nvr_with(&theta(&[0.0]), &NoiseSpec::gaussian(0.1), 6, &mut rng_for(0, 0), |_| {
            calls += 1;
            Ok(if calls % 3 == 0 { f64::NAN } else { 1.0 })
        })
        .unwrap();
        assert_eq!(e.non_finite, 2);
        assert_eq!(e.num_samples, 4);
    }

    #[test]
    fn stderr_scales_as_inverse_root_n() {
        let h = [1.0, 1.0];
        let p = theta(&[0.5, -0.5]);
        let small = estimate_nvr_with(&p, &NoiseSpec::gaussian(0.2), 2000, &mut rng_for(4, 0), quadratic(&h)).unwrap();
        let large = estimate_nvr_with(&p, &NoiseSpec::gaussian(0.2), 8000, &mut rng_for(5, 0), quadratic(&h)).unwrap();
        let ratio = small.stderr / large.stderr;
        assert!((1.6..=2.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        assert!(kl_gaussian([0.0; 5], 0.7, 0.7).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_single_coordinate_value() {
        // ln(2000) + 0.0025/20000 − 0.5
        let expected = 2000f64.ln() + 0.0025 / 20000.0 - 0.5;
        let kl = kl_gaussian([0.0], 0.05, 100.0).unwrap();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 7.100_902_5).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_non_positive_scales() {
        assert!(kl_gaussian([0.0], 0.0, 1.0).is_err());
        assert!(kl_gaussian([0.0], 1.0, -1.0).is_err());
    }

    #[test]
    fn kl_is_minimized_at_b_equal_sigma() {
        let t = [0.3, -0.2, 0.1];
        let sigma = 0.5;
        let at = |b: f64| kl_gaussian(t, b, sigma).unwrap();
        for k in 1..40 {
            let b = k as f64 * 0.025;
            assert!(at(b) >= at(sigma) - 1e-15, "b = {b}");
        }
    }

    #[test]
    fn bound_reference_value() {
        let v = pac_bayes_bound(0.0, 0.0, 50_000, 0.05, 0.0).unwrap();
        let expected = 4.0 * (2e6f64.ln() / 50_000.0).sqrt();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.06814).abs() < 1e-5);
    }

    #[test]
    fn bound_domain_and_kl_monotonicity() {
        assert!(pac_bayes_bound(0.0, 0.0, 0, 0.05, 0.0).is_err());
        assert!(pac_bayes_bound(0.0, 0.0, 10, 1.0, 0.0).is_err());
        assert!(pac_bayes_bound(0.0, -1.0, 10, 0.5, 0.0).is_err());
        let mut last = 0.0;
        for k in 0..20 {
            let v = pac_bayes_bound(0.1, k as f64 * 50.0, 1000, 0.05, 0.0).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn gap_arithmetic() {
        assert_eq!(generalization_gap(1.0, 1.0), 0.0);
        assert!((generalization_gap(0.99, 0.91) - 0.08).abs() < 1e-15);
        assert!((generalization_gap(0.5, 0.6) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn prior_from_weight_decay() {
        assert_eq!(prior_sigma_from_weight_decay(1e-4).unwrap(), 100.0);
        assert!(prior_sigma_from_weight_decay(0.0).is_err());
    }
}
