//! Neural variable risk minimization.
//!
//! NVRM trains a network while its stored weights carry a fresh random
//! perturbation at every minibatch, and removes that perturbation before
//! anything is evaluated. The crate contains the pieces needed to run and
//! study it on a CPU:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a define-by-run tape.
//! - [`model`]: the fully connected ReLU classifier, single or multi-head.
//! - [`optim`]: SGD, Adam, the [`optim::Nvrm`] wrapper and perturbed SGD.
//! - [`data`]: IDX loading, label corruption and continual-learning tasks.
//! - [`train`] and [`continual`]: training loops, EWC and task sequences.
//! - [`analysis`]: NVR estimates, Gaussian KL, the PAC-Bayes bound and
//!   weight-noise robustness sweeps.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod continual;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{Precision, Real};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/optimizer.md")]
    mod optimizer {}
    #[doc = include_str!("../../../book/src/flatness.md")]
    mod flatness {}
    #[doc = include_str!("../../../book/src/continual.md")]
    mod continual {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
