//! Randomized gradient checks of the full classifier.
//!
//! Central differences are meaningless across a ReLU kink, so instances with
//! a hidden pre-activation closer than [`KINK_MARGIN`] to zero are redrawn.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, max_relative_error};
use crate::error::Result;
use crate::model::{Fcn, FcnConfig};
use crate::real::Real;
use crate::tensor::{ParameterSet, Tensor};

pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub layer_widths: Vec<usize>,
    pub batch: usize,
    pub max_relative_error: f64,
}

/// A random FCN instance: model, weights, batch and labels.
pub struct Instance {
    pub model: Fcn,
    pub params: ParameterSet<f64>,
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
}

fn min_abs_preactivation(params: &ParameterSet<f64>, widths: &[usize], x: &Tensor<f64>) -> f64 {
    let mut min = f64::INFINITY;
    let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    for i in 0..widths.len() - 2 {
        let w = params.get(&format!("hidden.{i}.weight")).expect("built here");
        let b = params.get(&format!("hidden.{i}.bias")).expect("built here");
        let (fan_in, fan_out) = (widths[i], widths[i + 1]);
        for row in h.iter_mut() {
            let z: Vec<f64> = (0..fan_out)
                .map(|o| b.data()[o] + (0..fan_in).map(|k| row[k] * w.data()[k * fan_out + o]).sum::<f64>())
                .collect();
            min = z.iter().fold(min, |m, v| m.min(v.abs()));
            *row = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    min
}

/// Draws widths in `2..=6`, one or two hidden layers, a batch of 1 to 8 and
/// non-zero biases so every unit sees a generic input.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<Instance> {
    loop {
        let depth = rng.random_range(1..=2);
        let mut widths = vec![rng.random_range(2..=6)];
        widths.extend((0..depth).map(|_| rng.random_range(2..=6)));
        let classes = rng.random_range(2..=4);
        widths.push(classes);
        let model = Fcn::new(FcnConfig::new(widths.clone(), 1))?;
        let mut params: ParameterSet<f64> = model.init(rng);
        for t in params.tensors_mut() {
            if t.ndim() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = 0.5 * f64::standard_normal(rng));
            }
        }
        let batch = rng.random_range(1..=8);
        let data = (0..batch * widths[0]).map(|_| f64::standard_normal(rng)).collect();
        let x = Tensor::matrix(batch, widths[0], data)?;
        let y = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        if min_abs_preactivation(&params, &widths, &x) >= KINK_MARGIN {
            return Ok(Instance { model, params, x, y });
        }
    }
}

/// Largest elementwise relative error between tape and central-difference
/// gradients on one instance.
pub fn check_instance(inst: &Instance, h: f64) -> Result<f64> {
    let analytic = inst.model.forward_loss(&inst.params, &inst.x, &inst.y, 0)?.backward()?;
    let numeric = finite_diff_grad(
        |p| Ok(inst.model.forward_loss(p, &inst.x, &inst.y, 0)?.loss),
        &inst.params,
        h,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Runs `cases` independent random checks.
pub fn check_random_fcns<R: Rng + ?Sized>(cases: usize, h: f64, rng: &mut R) -> Result<Vec<GradCheckCase>> {
    (0..cases)
        .map(|_| {
            let inst = random_instance(rng)?;
            Ok(GradCheckCase {
                layer_widths: inst.model.config().layer_widths.clone(),
                batch: inst.x.rows(),
                max_relative_error: check_instance(&inst, h)?,
            })
        })
        .collect()
}
