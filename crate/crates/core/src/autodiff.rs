//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every minibatch. Each operation appends a node
//! holding its output value and whatever it needs for the backward rule, so
//! the node list is topologically ordered by construction. [`Tape::backward`]
//! walks it once in reverse and can only run once per tape.
//!
//! Parameter leaves borrow their tensors from the [`ParameterSet`] instead of
//! copying them, so a tape lives no longer than the parameters it reads.
//!
//! ```
//! use nvrm::autodiff::Tape;
//! use nvrm::tensor::{ParameterSet, Tensor};
//!
//! let mut params = ParameterSet::new();
//! params
//!     .push("theta", Tensor::vector(&[1.0, -2.0, 3.0]).with_requires_grad(true))
//!     .unwrap();
//!
//! let mut tape = Tape::new();
//! let vars = tape.parameters(&params);
//! let loss = tape.half_squared_norm(vars[0]);
//! assert_eq!(tape.scalar(loss).unwrap(), 7.0);
//!
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(0).unwrap().data(), &[1.0, -2.0, 3.0]);
//! ```

use std::borrow::Cow;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{gemm, Gradients, ParameterSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'a, F> {
    Leaf {
        param: Option<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Sum {
        x: Var,
    },
    HalfSquaredNorm {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    WeightedSquaredDistance {
        x: Var,
        anchor: &'a [F],
        weights: &'a [F],
        scale: F,
    },
}

struct Node<'a, F: Real> {
    op: Op<'a, F>,
    value: Cow<'a, Tensor<F>>,
    requires_grad: bool,
    label: Cow<'a, str>,
}

/// Append-only record of a forward computation.
pub struct Tape<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    num_params: usize,
    consumed: bool,
}

impl<'a, F: Real> Default for Tape<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Real> Tape<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            num_params: 0,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<F> {
        self.value(v).item()
    }

    pub fn label(&self, v: Var) -> &str {
        &self.nodes[v.0].label
    }

    /// Consumes the tape and returns one node's value without copying it
    /// when the tape owns it.
    pub fn into_value(mut self, v: Var) -> Tensor<F> {
        let node = self.nodes.swap_remove(v.0);
        node.value.into_owned()
    }

    fn push(&mut self, op: Op<'a, F>, value: Tensor<F>, requires_grad: bool, label: &'static str) -> Var {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
            label: Cow::Borrowed(label),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers every tensor of `params` as a leaf, in order.
    ///
    /// Gradients returned by [`Tape::backward`] are indexed like `params`.
    pub fn parameters(&mut self, params: &'a ParameterSet<F>) -> Vec<Var> {
        self.num_params = self.num_params.max(params.len());
        params
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                self.nodes.push(Node {
                    op: Op::Leaf { param: Some(i) },
                    value: Cow::Borrowed(t),
                    requires_grad: t.requires_grad(),
                    label: Cow::Borrowed(name),
                });
                Var(self.nodes.len() - 1)
            })
            .collect()
    }

    /// A constant input owned by the tape. Never receives a gradient.
    pub fn input(&mut self, label: &'static str, value: Tensor<F>) -> Var {
        self.push(Op::Leaf { param: None }, value, false, label)
    }

    /// A constant input borrowed for the tape's lifetime.
    pub fn input_ref(&mut self, label: &'static str, value: &'a Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { param: None },
            value: Cow::Borrowed(value),
            requires_grad: false,
            label: Cow::Borrowed(label),
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` for 2-D `a: m×k` and `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err(
                self.label(b).to_string(),
                format!(
                    "cannot multiply `{}` {:?} by {:?}",
                    self.label(a),
                    ta.shape(),
                    tb.shape()
                ),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, F::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b }, value, rg, "matmul"))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.ndim() != 2 || tb.ndim() != 1 || tb.len() != tx.shape()[1] {
            return Err(shape_err(
                self.label(bias).to_string(),
                format!("bias {:?} does not fit activations {:?}", tb.shape(), tx.shape()),
            ));
        }
        let n = tb.len();
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddBias { x, bias }, value, rg, "add_bias"))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(x);
        self.push(Op::Relu { x }, value, rg, "relu")
    }

    /// Mean softmax cross-entropy of `logits: m×C` against integer labels.
    ///
    /// Log-sum-exp is stabilised by subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 {
            return Err(shape_err(
                self.label(logits).to_string(),
                format!("logits must be 2-D, got {:?}", t.shape()),
            ));
        }
        let (m, c) = (t.shape()[0], t.shape()[1]);
        if m == 0 {
            return Err(Error::Empty("cross-entropy over an empty batch".into()));
        }
        if labels.len() != m {
            return Err(shape_err(
                "batch_y",
                format!("{} labels for {m} rows of logits", labels.len()),
            ));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
            return Err(shape_err(
                "batch_y",
                format!("label {y} at position {i} is out of range for {c} classes"),
            ));
        }
        let mut probs = vec![F::zero(); m * c];
        let mut total = F::zero();
        for (i, (row, p)) in t.data().chunks_exact(c).zip(probs.chunks_exact_mut(c)).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (pj, &z) in p.iter_mut().zip(row) {
                *pj = (z - max).exp();
                denom += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= denom;
            }
            total += max + denom.ln() - row[labels[i]];
        }
        let loss = total / F::of(m as f64);
        let rg = self.rg(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(loss), rg, "softmax_cross_entropy"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), rg, "sum")
    }

    /// `½‖x‖²`
    pub fn half_squared_norm(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.rg(x);
        self.push(Op::HalfSquaredNorm { x }, Tensor::scalar(s / F::of(2.0)), rg, "half_squared_norm")
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                self.label(b).to_string(),
                format!(
                    "shape {:?} differs from `{}` {:?}",
                    self.value(b).shape(),
                    self.label(a),
                    self.value(a).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, value, rg, "add"))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a, b }, value, rg, "mul"))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(Op::Scale { x, factor }, value, rg, "scale")
    }

    /// `scale · Σᵢ wᵢ (xᵢ − aᵢ)²` with constant anchor `a` and weights `w`.
    pub fn weighted_squared_distance(
        &mut self,
        x: Var,
        anchor: &'a [F],
        weights: &'a [F],
        scale: F,
    ) -> Result<Var> {
        let t = self.value(x);
        if anchor.len() != t.len() || weights.len() != t.len() {
            return Err(shape_err(
                self.label(x).to_string(),
                format!(
                    "{} values against anchor of {} and weights of {}",
                    t.len(),
                    anchor.len(),
                    weights.len()
                ),
            ));
        }
        let s: F = t
            .data()
            .iter()
            .zip(anchor)
            .zip(weights)
            .map(|((&v, &a), &w)| {
                let d = v - a;
                w * d * d
            })
            .sum();
        let rg = self.rg(x);
        let op = Op::WeightedSquaredDistance {
            x,
            anchor,
            weights,
            scale,
        };
        Ok(self.push(op, Tensor::scalar(scale * s), rg, "weighted_squared_distance"))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every parameter leaf that requires a gradient gets one, zero-filled
    /// when the loss does not depend on it. Fails with [`Error::StaleTape`]
    /// when called a second time.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        let node_grads = self.propagate(loss, false)?;
        Ok(self.collect_param_grads(node_grads))
    }

    /// Like [`Tape::backward`] but also returns the gradient of the loss
    /// with respect to every node, indexed by [`Var::index`].
    pub fn backward_with_nodes(&mut self, loss: Var) -> Result<(Gradients<F>, Vec<Option<Vec<F>>>)> {
        let node_grads = self.propagate(loss, true)?;
        let params = self.collect_param_grads(node_grads.clone());
        Ok((params, node_grads))
    }

    fn collect_param_grads(&self, mut node_grads: Vec<Option<Vec<F>>>) -> Gradients<F> {
        let mut grads = Gradients::empty(self.num_params);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if !node.requires_grad {
                    continue;
                }
                let shape = node.value.shape();
                let g = match node_grads[i].take() {
                    Some(data) => Tensor::new(shape.to_vec(), data).expect("gradient mirrors value shape"),
                    None => Tensor::zeros(shape),
                };
                match grads.get(p) {
                    Some(_) => {
                        let single = Gradients::from_tensors_at(self.num_params, p, g);
                        grads.add_scaled(&single, F::one());
                    }
                    None => grads.set(p, g),
                }
            }
        }
        grads
    }

    fn propagate(&mut self, loss: Var, keep_all: bool) -> Result<Vec<Option<Vec<F>>>> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                self.label(loss).to_string(),
                format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_rule(idx, &g, &mut grads);
            if keep_all {
                grads[idx] = Some(g);
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], target: Var, contribution: impl FnOnce(&mut [F], bool)) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(buf) => contribution(buf, true),
            slot @ None => {
                let mut buf = vec![F::zero(); self.value(target).len()];
                contribution(&mut buf, false);
                *slot = Some(buf);
            }
        }
    }

    fn apply_rule(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC · Bᵀ
                self.accumulate(grads, *a, |buf, acc| {
                    let beta = if acc { F::one() } else { F::zero() };
                    gemm(m, n, k, g, false, tb.data(), true, beta, buf);
                });
                // dB = Aᵀ · dC
                self.accumulate(grads, *b, |buf, acc| {
                    let beta = if acc { F::one() } else { F::zero() };
                    gemm(k, m, n, ta.data(), true, g, false, beta, buf);
                });
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |buf, _| add_into(buf, g));
                let n = self.value(*bias).len();
                self.accumulate(grads, *bias, |buf, _| {
                    for row in g.chunks_exact(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                self.accumulate(grads, *x, |buf, _| {
                    for ((b, &gi), &xi) in buf.iter_mut().zip(g).zip(xs) {
                        if xi > F::zero() {
                            *b += gi;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                let c = probs.len() / m;
                let coef = g[0] / F::of(m as f64);
                self.accumulate(grads, *logits, |buf, _| {
                    for (i, (brow, prow)) in buf.chunks_exact_mut(c).zip(probs.chunks_exact(c)).enumerate() {
                        for (j, (b, &p)) in brow.iter_mut().zip(prow).enumerate() {
                            let target = if j == labels[i] { F::one() } else { F::zero() };
                            *b += coef * (p - target);
                        }
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |buf, _| buf.iter_mut().for_each(|b| *b += g[0]));
            }
            Op::HalfSquaredNorm { x } => {
                let xs = self.value(*x).data();
                self.accumulate(grads, *x, |buf, _| {
                    for (b, &xi) in buf.iter_mut().zip(xs) {
                        *b += g[0] * xi;
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |buf, _| add_into(buf, g));
                self.accumulate(grads, *b, |buf, _| add_into(buf, g));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |buf, _| {
                    for ((o, &gi), &bi) in buf.iter_mut().zip(g).zip(tb) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |buf, _| {
                    for ((o, &gi), &ai) in buf.iter_mut().zip(g).zip(ta) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |buf, _| {
                    for (b, &gi) in buf.iter_mut().zip(g) {
                        *b += *factor * gi;
                    }
                });
            }
            Op::WeightedSquaredDistance {
                x,
                anchor,
                weights,
                scale,
            } => {
                let xs = self.value(*x).data();
                let two = F::of(2.0);
                self.accumulate(grads, *x, |buf, _| {
                    for (((b, &xi), &a), &w) in buf.iter_mut().zip(xs).zip(anchor.iter()).zip(weights.iter()) {
                        *b += g[0] * two * *scale * w * (xi - a);
                    }
                });
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<F: Real> Gradients<F> {
    fn from_tensors_at(len: usize, i: usize, g: Tensor<F>) -> Self {
        let mut out = Self::empty(len);
        out.set(i, g);
        out
    }
}

/// Central-difference gradient of `loss_fn` at `params`.
///
/// Each trainable coordinate is probed at `θ ± h·eᵢ`; frozen parameters get
/// no entry. The probe restores every coordinate before moving on.
pub fn finite_diff_grad<F: Real>(
    mut loss_fn: impl FnMut(&ParameterSet<F>) -> Result<F>,
    params: &ParameterSet<F>,
    h: F,
) -> Result<Gradients<F>> {
    if !(h > F::zero()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut grads = Gradients::empty(params.len());
    let two_h = h + h;
    for p in 0..params.len() {
        if !params.tensor(p).requires_grad() {
            continue;
        }
        let mut g = vec![F::zero(); params.tensor(p).len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let original = probe.tensor(p).data()[i];
            probe.tensor_mut(p).data_mut()[i] = original + h;
            let plus = loss_fn(&probe)?;
            probe.tensor_mut(p).data_mut()[i] = original - h;
            let minus = loss_fn(&probe)?;
            probe.tensor_mut(p).data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    name: params.name(p).to_string(),
                    index: i,
                });
            }
            *gi = (plus - minus) / two_h;
        }
        grads.set(p, Tensor::new(params.tensor(p).shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`, the elementwise metric used by gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`] between two gradient maps.
pub fn max_relative_error<F: Real>(analytic: &Gradients<F>, numeric: &Gradients<F>) -> f64 {
    (0..analytic.len())
        .filter_map(|i| Some((analytic.get(i)?, numeric.get(i)?)))
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(x, y)| relative_error(x.as_f64(), y.as_f64())))
        .fold(0.0, f64::max)
}
