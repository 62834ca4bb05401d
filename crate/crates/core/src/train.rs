//! Minibatch training and evaluation.
//!
//! [`AnyOptimizer`] erases the choice between plain, perturbed and NVRM
//! optimizers so the loops here (and in [`crate::continual`]) treat them
//! alike. Evaluation always goes through [`AnyOptimizer::eval_clean`], so an
//! NVRM model is scored on its de-noised weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::continual::EwcAnchor;
use crate::data::{Corruption, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax, Fcn, FcnConfig};
use crate::optim::{Adam, AdamConfig, NoiseSpec, Nvrm, Optimizer, Psgd, Sgd, SgdConfig, StateEntries, StepDecay};
use crate::real::Real;
use crate::tensor::{ParameterSet, Tensor};

/// Independent RNG streams derived from one run seed.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const CORRUPTION: u64 = 3;
    pub const TASKS: u64 = 4;
    pub const FISHER: u64 = 5;
    pub const EVAL: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    NvrmSgd,
    NvrmAdam,
    Psgd,
}

impl OptimizerKind {
    pub fn is_nvrm(self) -> bool {
        matches!(self, Self::NvrmSgd | Self::NvrmAdam)
    }

    pub fn uses_noise(self) -> bool {
        matches!(self, Self::NvrmSgd | Self::NvrmAdam | Self::Psgd)
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown optimizer `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "no_noise")]
    pub noise: NoiseSpec,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn no_noise() -> NoiseSpec {
    NoiseSpec::none()
}

impl OptimizerConfig {
    pub fn new(name: OptimizerKind, lr: f64) -> Self {
        Self {
            name,
            lr,
            momentum: 0.0,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            weight_decay: 0.0,
            noise: NoiseSpec::none(),
        }
    }

    pub fn momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig::new(self.lr).momentum(self.momentum).weight_decay(self.weight_decay)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Every problem with the configuration, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!("optimizer.lr: must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("optimizer.momentum: must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            out.push(format!("optimizer.beta1: must lie in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            out.push(format!("optimizer.beta2: must lie in [0, 1), got {}", self.beta2));
        }
        if !(self.eps > 0.0) {
            out.push(format!("optimizer.eps: must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("optimizer.weight_decay: must be finite and non-negative, got {}", self.weight_decay));
        }
        if let Err(e) = self.noise.validate() {
            out.push(format!("optimizer.noise.b: {e}"));
        }
        if self.name == OptimizerKind::Psgd && self.noise.family != crate::optim::NoiseFamily::Gaussian {
            out.push("optimizer.noise.family: psgd only supports gaussian noise".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Next optimizer noise generator from a stream of seeds.
pub(crate) fn noise_rng(seeds: &mut ChaCha8Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeds.random())
}

pub enum AnyOptimizer<F: Real> {
    Sgd(Sgd<F>),
    Adam(Adam<F>),
    NvrmSgd(Nvrm<F, Sgd<F>>),
    NvrmAdam(Nvrm<F, Adam<F>>),
    Psgd(Psgd<F>),
}

impl<F: Real> AnyOptimizer<F> {
    /// Builds the optimizer. Its noise generator is seeded with the first
    /// draw of stream [`stream::NOISE`], as for the first task of a
    /// continual run.
    pub fn build(config: &OptimizerConfig, seed: u64) -> Result<Self> {
        Self::build_with_rng(config, noise_rng(&mut rng_for(seed, stream::NOISE)))
    }

    pub fn build_with_rng(config: &OptimizerConfig, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(match config.name {
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(config.sgd())?),
            OptimizerKind::Adam => Self::Adam(Adam::new(config.adam())?),
            OptimizerKind::NvrmSgd => Self::NvrmSgd(Nvrm::with_rng(Sgd::new(config.sgd())?, config.noise, rng)?),
            OptimizerKind::NvrmAdam => Self::NvrmAdam(Nvrm::with_rng(Adam::new(config.adam())?, config.noise, rng)?),
            OptimizerKind::Psgd => {
                let mut p = Psgd::new(Sgd::new(config.sgd())?, config.noise, 0)?;
                p.set_rng(rng);
                Self::Psgd(p)
            }
        })
    }

    pub fn is_nvrm(&self) -> bool {
        matches!(self, Self::NvrmSgd(_) | Self::NvrmAdam(_))
    }

    /// Starts a perturbed phase (`ε₀ = 0`) if NVRM and not already started.
    pub fn prepare(&mut self, params: &ParameterSet<F>) -> Result<()> {
        match self {
            Self::NvrmSgd(o) if !o.is_perturbed() => o.attach(params),
            Self::NvrmAdam(o) if !o.is_perturbed() => o.attach(params),
            _ => Ok(()),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet<F>, grads: &crate::tensor::Gradients<F>) -> Result<()> {
        match self {
            Self::Sgd(o) => o.step(params, grads),
            Self::Adam(o) => o.step(params, grads),
            Self::NvrmSgd(o) => o.step(params, grads),
            Self::NvrmAdam(o) => o.step(params, grads),
            Self::Psgd(o) => o.step(params, grads),
        }
    }

    /// Removes any active perturbation; a no-op for other optimizers.
    pub fn finalize(&mut self, params: &mut ParameterSet<F>) -> Result<()> {
        match self {
            Self::NvrmSgd(o) if o.is_perturbed() => o.finalize(params),
            Self::NvrmAdam(o) if o.is_perturbed() => o.finalize(params),
            _ => Ok(()),
        }
    }

    /// Runs `eval` on clean weights, leaving the stored weights untouched.
    pub fn eval_clean<R>(&mut self, params: &mut ParameterSet<F>, eval: impl FnOnce(&ParameterSet<F>) -> R) -> Result<R> {
        match self {
            Self::NvrmSgd(o) if o.is_perturbed() => o.with_clean_weights(params, eval),
            Self::NvrmAdam(o) if o.is_perturbed() => o.with_clean_weights(params, eval),
            _ => Ok(eval(params)),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Self::Sgd(o) => o.learning_rate(),
            Self::Adam(o) => o.learning_rate(),
            Self::NvrmSgd(o) => o.learning_rate(),
            Self::NvrmAdam(o) => o.learning_rate(),
            Self::Psgd(o) => o.learning_rate(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        match self {
            Self::Sgd(o) => o.set_learning_rate(lr),
            Self::Adam(o) => o.set_learning_rate(lr),
            Self::NvrmSgd(o) => o.set_learning_rate(lr),
            Self::NvrmAdam(o) => o.set_learning_rate(lr),
            Self::Psgd(o) => o.set_learning_rate(lr),
        }
    }

    pub fn state_entries(&self, params: &ParameterSet<F>) -> StateEntries<F> {
        match self {
            Self::Sgd(o) => o.state_entries(params),
            Self::Adam(o) => o.state_entries(params),
            Self::NvrmSgd(o) => o.state_entries(params),
            Self::NvrmAdam(o) => o.state_entries(params),
            Self::Psgd(o) => o.state_entries(params),
        }
    }

    pub fn load_state_entries(&mut self, params: &ParameterSet<F>, entries: &[(String, Tensor<F>)]) -> Result<()> {
        match self {
            Self::Sgd(o) => o.load_state_entries(params, entries),
            Self::Adam(o) => o.load_state_entries(params, entries),
            Self::NvrmSgd(o) => o.load_state_entries(params, entries),
            Self::NvrmAdam(o) => o.load_state_entries(params, entries),
            Self::Psgd(o) => o.load_state_entries(params, entries),
        }
    }
}

/// A fresh shuffled order of `0..n`, cut into batches (the last may be short).
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean training loss over the batches of one pass.
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
}

/// One pass over `data` in shuffled minibatches, optionally with EWC penalties.
///
/// The reported loss is the cross-entropy part only, measured at the weights
/// the gradient was taken at.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<F: Real, R: Rng + ?Sized>(
    model: &Fcn,
    params: &mut ParameterSet<F>,
    opt: &mut AnyOptimizer<F>,
    data: &Dataset<F>,
    head: usize,
    batch_size: usize,
    anchors: &[EwcAnchor<F>],
    rng: &mut R,
) -> Result<EpochStats> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    opt.prepare(params)?;
    let batches = epoch_batches(data.len(), batch_size, rng);
    let mut total = 0.0;
    for idx in &batches {
        let (x, y) = data.gather(idx);
        let (loss, grads) = {
            let mut tape = Tape::new();
            let vars = tape.parameters(params);
            let xv = tape.input_ref("batch_x", &x);
            let logits = model.build_logits(&mut tape, params, &vars, xv, head)?;
            let ce = tape.softmax_cross_entropy(logits, &y)?;
            let loss = tape.scalar(ce)?.as_f64();
            let mut objective = ce;
            for anchor in anchors {
                objective = anchor.add_penalty(&mut tape, params, &vars, objective)?;
            }
            (loss, tape.backward(objective)?)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                name: "training loss".into(),
                index: 0,
            });
        }
        total += loss;
        opt.step(params, &grads)?;
    }
    Ok(EpochStats {
        mean_loss: total / batches.len() as f64,
        steps: batches.len(),
    })
}

const EVAL_CHUNK: usize = 1000;

/// Predicted class of every example.
pub fn predictions<F: Real>(model: &Fcn, params: &ParameterSet<F>, data: &Dataset<F>, head: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.gather(chunk);
        let logits = model.predict(params, &x, head)?;
        out.extend((0..logits.rows()).map(|r| argmax(logits.row(r))));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy (accumulated in f64) and accuracy over the whole dataset.
pub fn evaluate<F: Real>(model: &Fcn, params: &ParameterSet<F>, data: &Dataset<F>, head: usize) -> Result<Evaluation> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.gather(chunk);
        let logits = model.predict(params, &x, head)?;
        for (r, &label) in y.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[label].as_f64();
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Accuracy restricted to examples where `mask[i] == keep`; `None` if there are none.
pub fn masked_accuracy(preds: &[usize], labels: &[usize], mask: &[bool], keep: bool) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ((&p, &y), &m) in preds.iter().zip(labels).zip(mask) {
        if m == keep {
            total += 1;
            hit += (p == y) as usize;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// A complete single-task training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: FcnConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Divide the learning rate by 10 every this many epochs.
    #[serde(default)]
    pub lr_decay_period: Option<usize>,
    #[serde(default)]
    pub corruption: Corruption,
    /// Train on the first `n` training examples only.
    #[serde(default)]
    pub train_subset: Option<usize>,
}

impl TrainConfig {
    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            initial: self.optimizer.lr,
            period: self.lr_decay_period,
            factor: 10.0,
        }
    }
}

/// Metrics after one epoch, all computed on de-noised weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy against the labels actually trained on.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub generalization_gap: f64,
    /// Accuracy on examples whose label was left intact.
    pub clean_subset_accuracy: Option<f64>,
    /// Accuracy against the flipped label on corrupted examples (memorization).
    pub noisy_subset_accuracy: Option<f64>,
    /// Accuracy against the original label on corrupted examples.
    pub noisy_subset_true_accuracy: Option<f64>,
}

pub struct TrainOutcome<F: Real> {
    pub params: ParameterSet<F>,
    pub epochs: Vec<EpochReport>,
    pub flip_mask: Vec<bool>,
}

/// Trains one model from scratch and reports per-epoch metrics.
///
/// `on_epoch` sees every report as soon as it is computed. The returned
/// parameters are de-noised.
pub fn run_training<F: Real>(
    config: &TrainConfig,
    train: &Dataset<F>,
    test: &Dataset<F>,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome<F>> {
    config.model.validate()?;
    let model = Fcn::new(config.model.clone())?;
    let train = match config.train_subset {
        Some(n) => train.take(n)?,
        None => train.clone(),
    };
    let (noisy_labels, mask) = config
        .corruption
        .apply(train.labels(), train.num_classes(), &mut rng_for(seed, stream::CORRUPTION))?;
    let noisy = train.with_labels(noisy_labels)?;
    let corrupted = config.corruption != Corruption::None;

    let mut params: ParameterSet<F> = model.init(&mut rng_for(seed, stream::INIT));
    let mut opt = AnyOptimizer::build(&config.optimizer, seed)?;
    let mut shuffle = rng_for(seed, stream::SHUFFLE);
    let schedule = config.schedule();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = schedule.at(epoch);
        opt.set_learning_rate(lr);
        let stats = train_epoch(&model, &mut params, &mut opt, &noisy, 0, config.batch_size, &[], &mut shuffle)?;
        let report = opt.eval_clean(&mut params, |clean| -> Result<EpochReport> {
            let preds = predictions(&model, clean, &noisy, 0)?;
            let hits = preds.iter().zip(noisy.labels()).filter(|(p, y)| p == y).count();
            let train_accuracy = hits as f64 / noisy.len() as f64;
            let t = evaluate(&model, clean, test, 0)?;
            let (clean_acc, noisy_acc, noisy_true) = if corrupted {
                (
                    masked_accuracy(&preds, noisy.labels(), &mask, false),
                    masked_accuracy(&preds, noisy.labels(), &mask, true),
                    masked_accuracy(&preds, train.labels(), &mask, true),
                )
            } else {
                (None, None, None)
            };
            Ok(EpochReport {
                epoch,
                lr,
                train_loss: stats.mean_loss,
                train_accuracy,
                test_accuracy: t.accuracy,
                test_loss: t.loss,
                generalization_gap: crate::analysis::generalization_gap(train_accuracy, t.accuracy),
                clean_subset_accuracy: clean_acc,
                noisy_subset_accuracy: noisy_acc,
                noisy_subset_true_accuracy: noisy_true,
            })
        })??;
        on_epoch(&report);
        epochs.push(report);
    }
    opt.finalize(&mut params)?;
    Ok(TrainOutcome {
        params,
        epochs,
        flip_mask: mask,
    })
}
