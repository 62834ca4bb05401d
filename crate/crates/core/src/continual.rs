//! Sequential training on permuted or split MNIST, with optional EWC.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{make_permuted_tasks, make_split_tasks, Dataset, TaskKind, TaskSequence};
use crate::error::{Error, Result};
use crate::model::{Fcn, FcnConfig};
use crate::real::Real;
use crate::tensor::ParameterSet;
use crate::train::{evaluate, noise_rng, rng_for, stream, train_epoch, AnyOptimizer, OptimizerConfig};

/// Snapshot of the weights after a task and how much each one mattered to it.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcAnchor<F> {
    /// Anchor weights `θ*`, empty for parameters that were frozen.
    pub theta: Vec<Vec<F>>,
    /// Diagonal Fisher `F ≥ 0`, aligned with `theta`.
    pub fisher: Vec<Vec<F>>,
    pub lambda: f64,
}

impl<F: Real> EwcAnchor<F> {
    /// Anchors the current values of every parameter that has a Fisher entry.
    pub fn new(params: &ParameterSet<F>, fisher: Vec<Vec<F>>, lambda: f64) -> Result<Self> {
        if fisher.len() != params.len() {
            return Err(crate::error::shape_err(
                "fisher",
                format!("{} entries for {} parameters", fisher.len(), params.len()),
            ));
        }
        let mut theta = Vec::with_capacity(params.len());
        for (i, f) in fisher.iter().enumerate() {
            let t = params.tensor(i);
            if !f.is_empty() && f.len() != t.len() {
                return Err(crate::error::shape_err(params.name(i), format!("Fisher has {} values", f.len())));
            }
            theta.push(if f.is_empty() { Vec::new() } else { t.data().to_vec() });
        }
        Ok(Self { theta, fisher, lambda })
    }

    /// `(λ/2) Σᵢ Fᵢ (θᵢ − θ*ᵢ)²` evaluated directly.
    pub fn penalty(&self, params: &ParameterSet<F>) -> f64 {
        let mut s = 0.0;
        for (i, (a, f)) in self.theta.iter().zip(&self.fisher).enumerate() {
            for ((&v, &a), &f) in params.tensor(i).data().iter().zip(a).zip(f) {
                let d = (v - a).as_f64();
                s += f.as_f64() * d * d;
            }
        }
        0.5 * self.lambda * s
    }

    /// Appends this anchor's penalty for the trainable parameters to `loss`.
    pub fn add_penalty<'a>(
        &'a self,
        tape: &mut Tape<'a, F>,
        params: &ParameterSet<F>,
        vars: &[Var],
        loss: Var,
    ) -> Result<Var> {
        let mut total = loss;
        let scale = F::of(0.5 * self.lambda);
        for (i, (a, f)) in self.theta.iter().zip(&self.fisher).enumerate() {
            if a.is_empty() || !params.tensor(i).requires_grad() {
                continue;
            }
            let p = tape.weighted_squared_distance(vars[i], a, f, scale)?;
            total = tape.add(total, p)?;
        }
        Ok(total)
    }
}

/// `base_loss + Σ_anchors (λ/2) Σᵢ Fᵢ (θᵢ − θ*ᵢ)²`.
pub fn ewc_loss<F: Real>(base_loss: f64, params: &ParameterSet<F>, anchors: &[EwcAnchor<F>]) -> f64 {
    base_loss + anchors.iter().map(|a| a.penalty(params)).sum::<f64>()
}

/// Empirical diagonal Fisher at the observed labels, averaged over
/// `num_samples` examples drawn without replacement.
///
/// Frozen parameters get an empty entry.
pub fn fisher_diagonal<F: Real, R: Rng + ?Sized>(
    model: &Fcn,
    params: &ParameterSet<F>,
    data: &Dataset<F>,
    head: usize,
    num_samples: usize,
    rng: &mut R,
) -> Result<Vec<Vec<F>>> {
    if num_samples == 0 {
        return Err(Error::Empty("Fisher estimate needs at least one sample".into()));
    }
    if num_samples > data.len() {
        return Err(Error::Config(format!(
            "{num_samples} Fisher samples requested from {} examples",
            data.len()
        )));
    }
    let mut picks = rand::seq::index::sample(rng, data.len(), num_samples).into_vec();
    // The estimate is a sum, so fix the order it is accumulated in.
    picks.sort_unstable();
    let mut acc: Vec<Vec<F>> = params
        .tensors()
        .iter()
        .map(|t| if t.requires_grad() { vec![F::zero(); t.len()] } else { Vec::new() })
        .collect();
    for chunk in picks.chunks(256) {
        let (x, y) = data.gather(chunk);
        let sq = model.squared_example_grad_sum(params, &x, &y, head)?;
        for (i, a) in acc.iter_mut().enumerate() {
            if let Some(g) = sq.get(i) {
                for (s, &v) in a.iter_mut().zip(g.data()) {
                    *s += v;
                }
            }
        }
    }
    let inv = F::of(1.0 / num_samples as f64);
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|v| *v *= inv));
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    /// Task 0 is the unpermuted data.
    Permuted { num_tasks: usize },
    /// One head per class group, labels remapped to positions in the group.
    Split { groups: Vec<Vec<usize>> },
}

impl TaskSpec {
    pub fn split_mnist() -> Self {
        TaskSpec::Split {
            groups: (0..5).map(|k| vec![2 * k, 2 * k + 1]).collect(),
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, input_width: usize, rng: &mut R) -> Result<TaskSequence> {
        match self {
            TaskSpec::Permuted { num_tasks } => make_permuted_tasks(input_width, *num_tasks, rng),
            TaskSpec::Split { groups } => make_split_tasks(groups),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcConfig {
    pub lambda: f64,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
}

fn default_fisher_samples() -> usize {
    1024
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualConfig {
    pub model: FcnConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub epochs_per_task: usize,
    pub tasks: TaskSpec,
    #[serde(default)]
    pub ewc: Option<EwcConfig>,
    /// Defaults to a fresh optimizer per task for split tasks only.
    #[serde(default)]
    pub fresh_optimizer_per_task: Option<bool>,
    #[serde(default)]
    pub train_subset: Option<usize>,
}

fn one() -> usize {
    1
}

/// Accuracy of every seen task after every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    /// `accuracy[t][j]`: test accuracy on task `j ≤ t` after training task `t`.
    pub accuracy: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct ContinualCell {
    pub after_task: usize,
    pub task: usize,
    pub accuracy: f64,
}

impl ContinualReport {
    /// Base-task accuracy after each stage.
    pub fn base_trace(&self) -> Vec<f64> {
        self.accuracy.iter().map(|row| row[0]).collect()
    }

    /// Mean accuracy over the tasks seen so far, after each stage.
    pub fn mean_trace(&self) -> Vec<f64> {
        self.accuracy.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
    }

    /// Accuracy on each task right after it was trained.
    pub fn own_task(&self) -> Vec<f64> {
        self.accuracy.iter().enumerate().map(|(t, row)| row[t]).collect()
    }

    pub fn cells(&self) -> Vec<ContinualCell> {
        let mut out = Vec::new();
        for (t, row) in self.accuracy.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                out.push(ContinualCell {
                    after_task: t,
                    task: j,
                    accuracy: a,
                });
            }
        }
        out
    }

    /// One JSON object per `(after_task, task)` cell.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for c in self.cells() {
            serde_json::to_writer(&mut w, &c).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct ContinualOutcome<F: Real> {
    pub report: ContinualReport,
    pub params: ParameterSet<F>,
    /// Clean weights after each task.
    pub snapshots: Vec<ParameterSet<F>>,
}

/// Trains the tasks in order, evaluating every seen task after each one.
///
/// NVRM perturbations are removed at the end of each task and restart from
/// `ε₀ = 0` on the next. `on_task(t, row)` sees each accuracy row as soon as
/// it is available.
pub fn run_task_sequence<F: Real>(
    config: &ContinualConfig,
    train: &Dataset<F>,
    test: &Dataset<F>,
    seed: u64,
    mut on_task: impl FnMut(usize, &[f64]),
) -> Result<ContinualOutcome<F>> {
    config.model.validate()?;
    let seq = config.tasks.build(train.input_width(), &mut rng_for(seed, stream::TASKS))?;
    if seq.kind() == TaskKind::Split && config.model.heads != seq.num_heads() {
        return Err(Error::Config(format!(
            "split tasks need {} heads, model has {}",
            seq.num_heads(),
            config.model.heads
        )));
    }
    let model = Fcn::new(config.model.clone())?;
    let train = match config.train_subset {
        Some(n) => train.take(n)?,
        None => train.clone(),
    };
    let tests: Vec<Dataset<F>> = (0..seq.len()).map(|t| seq.apply(t, test)).collect::<Result<_>>()?;
    let fresh = config.fresh_optimizer_per_task.unwrap_or(seq.kind() == TaskKind::Split);

    let mut params: ParameterSet<F> = model.init(&mut rng_for(seed, stream::INIT));
    let mut shuffle = rng_for(seed, stream::SHUFFLE);
    let mut fisher_rng = rng_for(seed, stream::FISHER);
    let mut noise_seeds = rng_for(seed, stream::NOISE);
    let mut next_optimizer = || AnyOptimizer::build_with_rng(&config.optimizer, noise_rng(&mut noise_seeds));
    let mut opt = next_optimizer()?;
    let mut anchors: Vec<EwcAnchor<F>> = Vec::new();
    let mut accuracy = Vec::with_capacity(seq.len());
    let mut snapshots = Vec::with_capacity(seq.len());

    for t in 0..seq.len() {
        let head = seq.head(t);
        if seq.kind() == TaskKind::Split {
            params.set_all_trainable(true);
            params.set_trainable("head.", false);
            params.set_trainable(&Fcn::head_prefix(head), true);
        }
        if fresh && t > 0 {
            opt = next_optimizer()?;
        }
        let data = seq.apply(t, &train)?;
        for _ in 0..config.epochs_per_task {
            train_epoch(&model, &mut params, &mut opt, &data, head, config.batch_size, &anchors, &mut shuffle)?;
        }
        opt.finalize(&mut params)?;

        let row = (0..=t)
            .map(|j| evaluate(&model, &params, &tests[j], seq.head(j)).map(|e| e.accuracy))
            .collect::<Result<Vec<f64>>>()?;
        on_task(t, &row);
        accuracy.push(row);
        snapshots.push(params.clone());

        if let Some(ewc) = &config.ewc {
            let n = ewc.fisher_samples.min(data.len());
            let fisher = fisher_diagonal(&model, &params, &data, head, n, &mut fisher_rng)?;
            anchors.push(EwcAnchor::new(&params, fisher, ewc.lambda)?);
        }
    }
    params.set_all_trainable(true);
    Ok(ContinualOutcome {
        report: ContinualReport { accuracy },
        params,
        snapshots,
    })
}
