use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    /// `N(0, b²)`
    #[default]
    Gaussian,
    /// `Laplace(0, b)`, variance `2b²`
    Laplace,
    /// `Uniform(−b, b)`, variance `b²/3`
    Uniform,
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "laplace" => Ok(Self::Laplace),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown noise family `{other}`"))),
        }
    }
}

/// A zero-mean i.i.d. weight-noise distribution with scale `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub family: NoiseFamily,
    pub b: f64,
}

impl NoiseSpec {
    pub fn gaussian(b: f64) -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            b,
        }
    }

    pub fn new(family: NoiseFamily, b: f64) -> Self {
        Self { family, b }
    }

    pub fn none() -> Self {
        Self::gaussian(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b >= 0.0) || !self.b.is_finite() {
            return Err(Error::Config(format!("noise scale b must be a finite non-negative number, got {}", self.b)));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.b == 0.0
    }

    /// Per-coordinate variance of the family.
    pub fn variance(&self) -> f64 {
        let b2 = self.b * self.b;
        match self.family {
            NoiseFamily::Gaussian => b2,
            NoiseFamily::Laplace => 2.0 * b2,
            NoiseFamily::Uniform => b2 / 3.0,
        }
    }

    /// Overwrites `out` with fresh i.i.d. draws.
    pub fn fill<F: Real, R: Rng + ?Sized>(&self, out: &mut [F], rng: &mut R) {
        if self.is_zero() {
            out.iter_mut().for_each(|v| *v = F::zero());
            return;
        }
        let b = F::of(self.b);
        match self.family {
            NoiseFamily::Gaussian => out.iter_mut().for_each(|v| *v = F::standard_normal(rng) * b),
            NoiseFamily::Laplace => out.iter_mut().for_each(|v| {
                // Inverse CDF on u ∈ (−½, ½): −b·sign(u)·ln(1 − 2|u|).
                let u: f64 = rng.random::<f64>() - 0.5;
                let x = -self.b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln();
                *v = F::of(x);
            }),
            NoiseFamily::Uniform => out.iter_mut().for_each(|v| {
                let u: f64 = rng.random();
                *v = F::of(self.b * (2.0 * u - 1.0));
            }),
        }
    }
}

/// One noise tensor per requested shape, drawn in order.
pub fn sample_noise<F: Real, R: Rng + ?Sized>(spec: &NoiseSpec, shapes: &[Vec<usize>], rng: &mut R) -> Result<Vec<Tensor<F>>> {
    spec.validate()?;
    Ok(shapes
        .iter()
        .map(|shape| {
            let mut t = Tensor::zeros(shape);
            spec.fill(t.data_mut(), rng);
            t
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn zero_scale_is_exact_zero_for_every_family() {
        for family in [NoiseFamily::Gaussian, NoiseFamily::Laplace, NoiseFamily::Uniform] {
            let t = sample_noise::<f64, _>(&NoiseSpec::new(family, 0.0), &[vec![3, 4]], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert!(t[0].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn negative_scale_is_rejected() {
        assert!(sample_noise::<f64, _>(&NoiseSpec::gaussian(-0.1), &[vec![1]], &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let t = sample_noise::<f64, _>(&NoiseSpec::gaussian(0.05), &[vec![1_000_000]], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (mean, var) = moments(t[0].data());
        assert!((var.sqrt() - 0.05).abs() < 0.01 * 0.05);
        assert!(mean.abs() < 3.0 * 0.05 / 1000.0);
    }

    #[test]
    fn uniform_support_and_variance() {
        let spec = NoiseSpec::new(NoiseFamily::Uniform, 0.1);
        let t = sample_noise::<f64, _>(&spec, &[vec![1_000_000]], &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert!(t[0].data().iter().all(|v| (-0.1..=0.1).contains(v)));
        let (_, var) = moments(t[0].data());
        assert!((var - 0.01 / 3.0).abs() < 0.02 * 0.01 / 3.0);
    }

    #[test]
    fn laplace_variance_is_two_b_squared() {
        let spec = NoiseSpec::new(NoiseFamily::Laplace, 0.2);
        let t = sample_noise::<f64, _>(&spec, &[vec![1_000_000]], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (mean, var) = moments(t[0].data());
        // Laplace kurtosis 6: std of the variance estimate is sqrt(5/n)·σ².
        assert!((var - spec.variance()).abs() < 4.0 * (5.0f64 / 1e6).sqrt() * spec.variance());
        assert!(mean.abs() < 4.0 * spec.variance().sqrt() / 1000.0);
    }

    #[test]
    fn same_seed_same_noise() {
        let spec = NoiseSpec::new(NoiseFamily::Laplace, 0.3);
        let a = sample_noise::<f32, _>(&spec, &[vec![5], vec![2, 2]], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_noise::<f32, _>(&spec, &[vec![5], vec![2, 2]], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }
}
