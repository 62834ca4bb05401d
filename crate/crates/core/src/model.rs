//! Fully-connected ReLU classifiers with one or more output heads.
//!
//! Parameters are named `hidden.{i}.weight`, `hidden.{i}.bias` for the shared
//! trunk and `head.{k}.weight`, `head.{k}.bias` for the outputs. Weights are
//! stored `fan_in × fan_out` so a layer computes `x · W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{gemm, Gradients, ParameterSet, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcnConfig {
    /// Input width, hidden widths..., output width (per head).
    pub layer_widths: Vec<usize>,
    #[serde(default = "one")]
    pub heads: usize,
}

fn one() -> usize {
    1
}

impl FcnConfig {
    pub fn new(layer_widths: Vec<usize>, heads: usize) -> Self {
        Self { layer_widths, heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Config(format!(
                "an FCN needs input, at least one hidden and an output width; got {:?}",
                self.layer_widths
            )));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer {i} has zero width")));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    fn hidden_layers(&self) -> usize {
        self.layer_widths.len() - 2
    }
}

/// Output of [`Fcn::forward_loss`]: the loss value and the tape to differentiate it.
pub struct ForwardPass<'a, F: Real> {
    pub loss: F,
    pub tape: Tape<'a, F>,
    pub loss_node: Var,
}

impl<'a, F: Real> ForwardPass<'a, F> {
    pub fn backward(mut self) -> Result<Gradients<F>> {
        self.tape.backward(self.loss_node)
    }
}

/// A fully-connected ReLU network.
#[derive(Clone, Debug, PartialEq)]
pub struct Fcn {
    config: FcnConfig,
}

impl Fcn {
    pub fn new(config: FcnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &FcnConfig {
        &self.config
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    pub fn head_prefix(head: usize) -> String {
        format!("head.{head}.")
    }

    /// He-initialised parameters: weights `N(0, 2/fan_in)`, zero biases.
    pub fn init<F: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet<F> {
        let w = &self.config.layer_widths;
        let mut params = ParameterSet::new();
        let layer = |params: &mut ParameterSet<F>, prefix: String, fan_in: usize, fan_out: usize, rng: &mut R| {
            let std = F::of((2.0 / fan_in as f64).sqrt());
            let weights = (0..fan_in * fan_out).map(|_| F::standard_normal(rng) * std).collect();
            let weight = Tensor::matrix(fan_in, fan_out, weights).expect("sized").with_requires_grad(true);
            let bias = Tensor::zeros(&[fan_out]).with_requires_grad(true);
            params.push(format!("{prefix}.weight"), weight).expect("unique");
            params.push(format!("{prefix}.bias"), bias).expect("unique");
        };
        for i in 0..self.config.hidden_layers() {
            layer(&mut params, format!("hidden.{i}"), w[i], w[i + 1], rng);
        }
        let last_hidden = w[w.len() - 2];
        for k in 0..self.config.heads {
            layer(&mut params, format!("head.{k}"), last_hidden, self.config.output_width(), rng);
        }
        params
    }

    /// Checks names and shapes of `params` against the configuration.
    pub fn check_params<F: Real>(&self, params: &ParameterSet<F>) -> Result<()> {
        let w = &self.config.layer_widths;
        let expect = |name: String, shape: Vec<usize>| -> Result<()> {
            match params.get(&name) {
                None => Err(shape_err(name, "parameter is missing")),
                Some(t) if t.shape() != shape.as_slice() => Err(shape_err(
                    name,
                    format!("expected shape {shape:?}, found {:?}", t.shape()),
                )),
                Some(_) => Ok(()),
            }
        };
        for i in 0..self.config.hidden_layers() {
            expect(format!("hidden.{i}.weight"), vec![w[i], w[i + 1]])?;
            expect(format!("hidden.{i}.bias"), vec![w[i + 1]])?;
        }
        let last_hidden = w[w.len() - 2];
        for k in 0..self.config.heads {
            expect(format!("head.{k}.weight"), vec![last_hidden, self.config.output_width()])?;
            expect(format!("head.{k}.bias"), vec![self.config.output_width()])?;
        }
        Ok(())
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.config.heads {
            return Err(Error::OutOfRange(format!(
                "head {head} requested but the model has {} head(s)",
                self.config.heads
            )));
        }
        Ok(())
    }

    fn check_input<F: Real>(&self, x: &Tensor<F>) -> Result<()> {
        if x.ndim() != 2 || x.shape()[1] != self.config.input_width() {
            return Err(shape_err(
                "batch_x",
                format!(
                    "expected (batch, {}) input, got {:?}",
                    self.config.input_width(),
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Records the logits computation on `tape`, reading parameters through
    /// `vars` (as returned by [`Tape::parameters`]).
    pub fn build_logits<'a, F: Real>(
        &self,
        tape: &mut Tape<'a, F>,
        params: &ParameterSet<F>,
        vars: &[Var],
        x: Var,
        head: usize,
    ) -> Result<Var> {
        self.check_head(head)?;
        let var = |name: &str| -> Result<Var> {
            params
                .index_of(name)
                .map(|i| vars[i])
                .ok_or_else(|| shape_err(name.to_string(), "parameter is missing"))
        };
        let mut h = x;
        for i in 0..self.config.hidden_layers() {
            let z = tape.matmul(h, var(&format!("hidden.{i}.weight"))?)?;
            let z = tape.add_bias(z, var(&format!("hidden.{i}.bias"))?)?;
            h = tape.relu(z);
        }
        let z = tape.matmul(h, var(&format!("head.{head}.weight"))?)?;
        tape.add_bias(z, var(&format!("head.{head}.bias"))?)
    }

    /// Mean cross-entropy of a batch plus the tape to differentiate it.
    pub fn forward_loss<'a, F: Real>(
        &self,
        params: &'a ParameterSet<F>,
        batch_x: &'a Tensor<F>,
        batch_y: &[usize],
        head: usize,
    ) -> Result<ForwardPass<'a, F>> {
        self.check_input(batch_x)?;
        if batch_x.rows() != batch_y.len() {
            return Err(shape_err(
                "batch_y",
                format!("{} labels for {} inputs", batch_y.len(), batch_x.rows()),
            ));
        }
        let mut tape = Tape::new();
        let vars = tape.parameters(params);
        let x = tape.input_ref("batch_x", batch_x);
        let logits = self.build_logits(&mut tape, params, &vars, x, head)?;
        let loss_node = tape.softmax_cross_entropy(logits, batch_y)?;
        let loss = tape.scalar(loss_node)?;
        Ok(ForwardPass { loss, tape, loss_node })
    }

    /// Logits of shape `(batch, output_width)` through the selected head.
    pub fn predict<F: Real>(&self, params: &ParameterSet<F>, batch_x: &Tensor<F>, head: usize) -> Result<Tensor<F>> {
        self.check_head(head)?;
        self.check_input(batch_x)?;
        let get = |name: String| params.get(&name).ok_or_else(|| shape_err(name, "parameter is missing"));
        let rows = batch_x.rows();
        let mut h = batch_x.data().to_vec();
        let mut width = self.config.input_width();
        let layer = |h: &[F], width: usize, w: &Tensor<F>, b: &Tensor<F>, relu: bool| -> Result<Vec<F>> {
            if w.shape() != [width, b.len()] {
                return Err(shape_err("weight", format!("expected ({width}, {}), got {:?}", b.len(), w.shape())));
            }
            let out_w = b.len();
            let mut out = vec![F::zero(); rows * out_w];
            for row in out.chunks_exact_mut(out_w) {
                row.copy_from_slice(b.data());
            }
            gemm(rows, width, out_w, h, false, w.data(), false, F::one(), &mut out);
            if relu {
                out.iter_mut().for_each(|v| {
                    if *v < F::zero() {
                        *v = F::zero()
                    }
                });
            }
            Ok(out)
        };
        for i in 0..self.config.hidden_layers() {
            let w = get(format!("hidden.{i}.weight"))?;
            let b = get(format!("hidden.{i}.bias"))?;
            h = layer(&h, width, w, b, true)?;
            width = b.len();
        }
        let w = get(format!("head.{head}.weight"))?;
        let b = get(format!("head.{head}.bias"))?;
        let logits = layer(&h, width, w, b, false)?;
        Tensor::matrix(rows, self.config.output_width(), logits)
    }

    /// Sum over the batch of squared per-example gradients of the
    /// cross-entropy, for every trainable parameter.
    ///
    /// For a linear layer the per-example weight gradient is the outer
    /// product `aᵢ ⊗ δᵢ`, so the sum of its elementwise squares is
    /// `(a ⊙ a)ᵀ (δ ⊙ δ)`: one extra matrix product per layer instead of one
    /// backward pass per example.
    pub fn squared_example_grad_sum<F: Real>(
        &self,
        params: &ParameterSet<F>,
        batch_x: &Tensor<F>,
        batch_y: &[usize],
        head: usize,
    ) -> Result<Gradients<F>> {
        self.check_input(batch_x)?;
        let m = batch_x.rows();
        let mut tape = Tape::new();
        let vars = tape.parameters(params);
        let x = tape.input_ref("batch_x", batch_x);

        // Rebuild the forward pass, remembering (layer input, pre-activation, weight, bias).
        let mut layers: Vec<(Var, Var, usize, usize)> = Vec::new();
        let idx = |name: String| params.index_of(&name).ok_or_else(|| shape_err(name, "parameter is missing"));
        let mut h = x;
        let mut plan: Vec<(String, bool)> = (0..self.config.hidden_layers())
            .map(|i| (format!("hidden.{i}"), true))
            .collect();
        self.check_head(head)?;
        plan.push((format!("head.{head}"), false));
        for (prefix, relu) in plan {
            let wi = idx(format!("{prefix}.weight"))?;
            let bi = idx(format!("{prefix}.bias"))?;
            let z = tape.matmul(h, vars[wi])?;
            let z = tape.add_bias(z, vars[bi])?;
            layers.push((h, z, wi, bi));
            h = if relu { tape.relu(z) } else { z };
        }
        let loss = tape.softmax_cross_entropy(h, batch_y)?;

        // Every parameter must be reachable so δ is recorded for every layer.
        let (_, node_grads) = tape.backward_with_nodes(loss)?;
        let scale = F::of(m as f64);
        let mut out = Gradients::empty(params.len());
        for (input, pre, wi, bi) in layers {
            let a = tape.value(input);
            let (k, n) = (a.shape()[1], tape.value(pre).shape()[1]);
            let delta_sq: Vec<F> = match &node_grads[pre.index()] {
                Some(d) => d.iter().map(|&v| (v * scale) * (v * scale)).collect(),
                None => vec![F::zero(); m * n],
            };
            let a_sq: Vec<F> = a.data().iter().map(|&v| v * v).collect();
            if params.tensor(wi).requires_grad() {
                let mut gw = vec![F::zero(); k * n];
                gemm(k, m, n, &a_sq, true, &delta_sq, false, F::zero(), &mut gw);
                out.set(wi, Tensor::matrix(k, n, gw)?);
            }
            if params.tensor(bi).requires_grad() {
                let mut gb = vec![F::zero(); n];
                for row in delta_sq.chunks_exact(n) {
                    for (g, &d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
                out.set(bi, Tensor::vector(&gb));
            }
        }
        Ok(out)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || logits.rows() == 0 {
        return Err(Error::Empty("accuracy of an empty batch".into()));
    }
    if logits.rows() != labels.len() {
        return Err(shape_err(
            "labels",
            format!("{} labels for {} rows of logits", labels.len(), logits.rows()),
        ));
    }
    let correct = (0..labels.len())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
