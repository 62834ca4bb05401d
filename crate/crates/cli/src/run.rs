//! Executes a validated config, one trial per seed.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use nvrm::analysis::{
    estimate_nvr, kl_gaussian_posterior_prior, pac_bayes_bound, prior_sigma_from_weight_decay, robustness_sweep,
};
use nvrm::continual::run_task_sequence;
use nvrm::data::{load_idx, normalize, Dataset};
use nvrm::gradcheck::check_random_fcns;
use nvrm::model::Fcn;
use nvrm::optim::NoiseSpec;
use nvrm::tensor::ParameterSet;
use nvrm::train::{evaluate, rng_for, run_training, stream, EpochReport};
use nvrm::{Precision, Real};

use crate::config::{ExperimentConfig, ExperimentKind, Format};
use crate::records::{now, read_records, MetricRecord, RecordSink, COMPLETE};
use crate::CliError;

/// Gradient checks pass below this elementwise relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct Outcome {
    pub path: PathBuf,
    pub format: Format,
    pub run_ids: Vec<String>,
    pub records_written: usize,
    /// Human-readable result lines for stdout.
    pub summary: Vec<String>,
}

/// Runs every trial of `config`, appending records to its output file.
///
/// Records of earlier incomplete attempts of the same runs are dropped first.
/// A run that already finished is refused unless `overwrite` is set, in which
/// case its old records are replaced. Records of other runs in the same file
/// are kept.
pub fn run_experiment(config: &ExperimentConfig, overwrite: bool, progress: &mut dyn Write) -> Result<Outcome, CliError> {
    config.validate()?;
    let format = config.resolved_format();
    let path = config.output.clone().expect("validated");
    let seeds = config.trial_seeds();
    let ids: Vec<String> = seeds.iter().map(|&s| config.run_id(s)).collect();
    prepare_output(&path, format, &ids, overwrite)?;
    let mut sink = RecordSink::append(&path, format)?;
    let mut outcome = Outcome {
        path,
        format,
        run_ids: ids,
        records_written: 0,
        summary: Vec::new(),
    };
    let result = match (config.kind, config.precision) {
        (ExperimentKind::GradCheck, _) | (_, Precision::F64) => {
            run_trials::<f64>(config, &seeds, &mut sink, &mut outcome, progress)
        }
        (_, Precision::F32) => run_trials::<f32>(config, &seeds, &mut sink, &mut outcome, progress),
    };
    result.map(|()| outcome)
}

fn prepare_output(path: &Path, format: Format, ids: &[String], overwrite: bool) -> Result<(), CliError> {
    if !path.exists() {
        return Ok(());
    }
    let existing = read_records(path, format).map_err(|e| {
        CliError::Config(format!("existing output is not a {format:?} records file ({e})"))
    })?;
    let ours: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let finished: BTreeSet<&str> = existing
        .iter()
        .filter(|r| r.metric == COMPLETE && ours.contains(r.run_id.as_str()))
        .map(|r| r.run_id.as_str())
        .collect();
    if !finished.is_empty() && !overwrite {
        return Err(CliError::Config(format!(
            "already completed in {}: {}; pass --overwrite to rerun",
            path.display(),
            finished.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let keep: Vec<MetricRecord> = existing.iter().filter(|r| !ours.contains(r.run_id.as_str())).cloned().collect();
    if keep.len() != existing.len() {
        std::fs::remove_file(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if !keep.is_empty() {
            RecordSink::append(path, format)?.write(&keep)?;
        }
    }
    Ok(())
}

/// Stamps records with a run's identity and writes them through the sink.
struct Emitter<'s> {
    sink: &'s mut RecordSink,
    run_id: String,
    seed: u64,
    kind: &'static str,
    written: usize,
    error: Option<CliError>,
}

impl Emitter<'_> {
    fn emit(&mut self, index: u64, metrics: &[(&str, f64)]) -> Result<(), CliError> {
        let timestamp = now();
        let records: Vec<MetricRecord> = metrics
            .iter()
            .map(|&(metric, value)| MetricRecord {
                run_id: self.run_id.clone(),
                seed: self.seed,
                kind: self.kind.to_string(),
                index,
                metric: metric.to_string(),
                value,
                timestamp,
            })
            .collect();
        self.sink.write(&records)?;
        self.written += records.len();
        Ok(())
    }

    /// For callbacks that cannot return errors: keeps the first one.
    fn emit_or_hold(&mut self, index: u64, metrics: &[(&str, f64)]) {
        if self.error.is_none() {
            if let Err(e) = self.emit(index, metrics) {
                self.error = Some(e);
            }
        }
    }

    fn check(&mut self) -> Result<(), CliError> {
        self.error.take().map_or(Ok(()), Err)
    }
}

fn run_trials<F: Real>(
    config: &ExperimentConfig,
    seeds: &[u64],
    sink: &mut RecordSink,
    outcome: &mut Outcome,
    progress: &mut dyn Write,
) -> Result<(), CliError> {
    let data = if config.needs_data() { Some(load_data::<F>(config)?) } else { None };
    let mut failures = Vec::new();
    for (&seed, id) in seeds.iter().zip(outcome.run_ids.clone()) {
        let _ = writeln!(progress, "[{id}] start");
        let mut em = Emitter {
            sink: &mut *sink,
            run_id: id.clone(),
            seed,
            kind: config.kind.as_str(),
            written: 0,
            error: None,
        };
        let result = run_trial(config, seed, data.as_ref(), &mut em, &mut outcome.summary, progress);
        let result = result.and_then(|verdict| {
            em.emit(0, &[(COMPLETE, 1.0)])?;
            Ok(verdict)
        });
        outcome.records_written += em.written;
        match result? {
            Ok(()) => {}
            Err(msg) => failures.push(format!("{id}: {msg}")),
        }
        let _ = writeln!(progress, "[{id}] done");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failures.join("; ")))
    }
}

fn load_data<F: Real>(config: &ExperimentConfig) -> Result<(Dataset<F>, Dataset<F>), CliError> {
    let paths = config.data.resolve(std::env::var_os("NV_DATA_DIR").map(PathBuf::from))?;
    let train = load_idx::<F>(&paths.train_images, &paths.train_labels)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", paths.train_images.display())))?;
    let test = load_idx::<F>(&paths.test_images, &paths.test_labels)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", paths.test_images.display())))?;
    if config.data.normalize {
        Ok(normalize(&train, &test)?)
    } else {
        Ok((train, test))
    }
}

/// The outer `Result` is a failure to run; the inner one a failed check.
fn run_trial<F: Real>(
    config: &ExperimentConfig,
    seed: u64,
    data: Option<&(Dataset<F>, Dataset<F>)>,
    em: &mut Emitter<'_>,
    summary: &mut Vec<String>,
    progress: &mut dyn Write,
) -> Result<Result<(), String>, CliError> {
    if config.kind == ExperimentKind::GradCheck {
        return grad_check(config, seed, em, summary);
    }
    let (train, test) = data.expect("loaded for every data kind");
    match config.kind {
        ExperimentKind::Continual => {
            let cc = config.continual_config();
            let out = run_task_sequence(&cc, train, test, seed, |t, row| {
                let mut metrics: Vec<(String, f64)> =
                    row.iter().enumerate().map(|(j, &a)| (format!("task{j}_accuracy"), a)).collect();
                metrics.push(("base_accuracy".into(), row[0]));
                metrics.push(("mean_accuracy".into(), row.iter().sum::<f64>() / row.len() as f64));
                let refs: Vec<(&str, f64)> = metrics.iter().map(|(m, v)| (m.as_str(), *v)).collect();
                em.emit_or_hold(t as u64, &refs);
                let _ = writeln!(progress, "[{}] after task {t}: {row:.4?}", em.run_id);
            })?;
            em.check()?;
            save_checkpoint(config, &em.run_id, &out.params)?;
            let r = &out.report;
            summary.push(format!(
                "{}: base-task accuracy {:.4}, mean accuracy {:.4}",
                em.run_id,
                r.base_trace().last().copied().unwrap_or(f64::NAN),
                r.mean_trace().last().copied().unwrap_or(f64::NAN)
            ));
        }
        ExperimentKind::Train => {
            let (_, params, last) = classifier(config, seed, train, test, em, progress)?;
            if let Some(r) = last {
                summary.push(format!(
                    "{}: train accuracy {:.4}, test accuracy {:.4}",
                    em.run_id, r.train_accuracy, r.test_accuracy
                ));
            }
            drop(params);
        }
        ExperimentKind::Robustness => {
            let (model, params, _) = classifier(config, seed, train, test, em, progress)?;
            let r = config.robustness.as_ref().expect("validated");
            let mut rng = rng_for(seed, stream::EVAL);
            let curve = robustness_sweep(&model, &params, test, 0, &r.scales, r.noise_trials, &mut rng)?;
            for (i, p) in curve.points.iter().enumerate() {
                em.emit(
                    i as u64,
                    &[
                        ("noise_scale", p.scale),
                        ("perturbed_accuracy_mean", p.mean_accuracy),
                        ("perturbed_accuracy_std", p.std_accuracy),
                    ],
                )?;
                summary.push(format!(
                    "{}: scale {} accuracy {:.4} ± {:.4}",
                    em.run_id, p.scale, p.mean_accuracy, p.std_accuracy
                ));
            }
        }
        ExperimentKind::NvEstimate => {
            let (model, params, _) = classifier(config, seed, train, test, em, progress)?;
            nv_estimate(config, seed, &model, &params, train, em, summary)?;
        }
        ExperimentKind::GradCheck => unreachable!(),
    }
    Ok(Ok(()))
}

fn grad_check(
    config: &ExperimentConfig,
    seed: u64,
    em: &mut Emitter<'_>,
    summary: &mut Vec<String>,
) -> Result<Result<(), String>, CliError> {
    let g = config.grad_check.clone().unwrap_or_default();
    let cases = check_random_fcns(g.cases, g.h, &mut rng_for(seed, stream::INIT))?;
    for (i, c) in cases.iter().enumerate() {
        em.emit(i as u64, &[("max_relative_error", c.max_relative_error)])?;
    }
    let worst = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    let passed = worst < GRAD_CHECK_TOLERANCE;
    em.emit(cases.len() as u64, &[("worst_relative_error", worst), ("passed", if passed { 1.0 } else { 0.0 })])?;
    summary.push(format!(
        "{}: max relative error {worst:.3e} over {} cases ({})",
        em.run_id,
        cases.len(),
        if passed { "pass" } else { "FAIL" }
    ));
    Ok(if passed {
        Ok(())
    } else {
        Err(format!("max relative error {worst:e} ≥ {GRAD_CHECK_TOLERANCE:e}"))
    })
}

fn epoch_metrics(r: &EpochReport) -> Vec<(&'static str, f64)> {
    let mut m = vec![
        ("lr", r.lr),
        ("train_loss", r.train_loss),
        ("train_accuracy", r.train_accuracy),
        ("test_accuracy", r.test_accuracy),
        ("test_loss", r.test_loss),
        ("generalization_gap", r.generalization_gap),
    ];
    let optional = [
        ("clean_subset_accuracy", r.clean_subset_accuracy),
        ("noisy_subset_accuracy", r.noisy_subset_accuracy),
        ("noisy_subset_true_accuracy", r.noisy_subset_true_accuracy),
    ];
    m.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
    m
}

/// Trains (emitting per-epoch records) or loads a single-head classifier.
fn classifier<F: Real>(
    config: &ExperimentConfig,
    seed: u64,
    train: &Dataset<F>,
    test: &Dataset<F>,
    em: &mut Emitter<'_>,
    progress: &mut dyn Write,
) -> Result<(Fcn, ParameterSet<F>, Option<EpochReport>), CliError> {
    let model = Fcn::new(config.model.clone().expect("validated"))?;
    if let Some(path) = &config.load_checkpoint {
        let (params, _) = nvrm::checkpoint::load::<F>(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        model.check_params(&params)?;
        return Ok((model, params, None));
    }
    let out = run_training(&config.train_config(), train, test, seed, |r| {
        em.emit_or_hold(r.epoch as u64, &epoch_metrics(r));
        let _ = writeln!(
            progress,
            "[{}] epoch {}: loss {:.4} train {:.4} test {:.4}",
            em.run_id, r.epoch, r.train_loss, r.train_accuracy, r.test_accuracy
        );
    })?;
    em.check()?;
    save_checkpoint(config, &em.run_id, &out.params)?;
    let last = out.epochs.last().cloned();
    Ok((model, out.params, last))
}

fn nv_estimate<F: Real>(
    config: &ExperimentConfig,
    seed: u64,
    model: &Fcn,
    params: &ParameterSet<F>,
    train: &Dataset<F>,
    em: &mut Emitter<'_>,
    summary: &mut Vec<String>,
) -> Result<(), CliError> {
    let nv = config.nv.as_ref().expect("validated");
    let fitted = match config.train_subset {
        Some(n) => train.take(n)?,
        None => train.clone(),
    };
    // `m` in the bound is the size of the training sample; the risk itself
    // may be estimated on a prefix of it.
    let m = fitted.len();
    let data = match nv.eval_subset {
        Some(n) => fitted.take(n)?,
        None => fitted,
    };
    let sigma = match nv.prior_sigma {
        Some(s) => s,
        None => prior_sigma_from_weight_decay(config.optimizer.map_or(0.0, |o| o.weight_decay))?,
    };
    let clean = evaluate(model, params, &data, 0)?;
    let mut rng = rng_for(seed, stream::EVAL);
    for (i, &b) in nv.b.iter().enumerate() {
        let e = estimate_nvr(model, params, &data, 0, &NoiseSpec::gaussian(b), nv.samples, &mut rng)?;
        let kl = kl_gaussian_posterior_prior(params, b, sigma)?;
        let bound = pac_bayes_bound(e.clean_loss, kl, m, nv.confidence, e.delta.max(0.0))?;
        em.emit(
            i as u64,
            &[
                ("b", b),
                ("clean_loss", e.clean_loss),
                ("clean_accuracy", clean.accuracy),
                ("perturbed_loss", e.perturbed_loss),
                ("nv_delta", e.delta),
                ("nv_delta_half_width", 3.0 * e.stderr),
                ("non_finite_samples", e.non_finite as f64),
                ("prior_sigma", sigma),
                ("kl", kl),
                ("pac_bayes_bound", bound),
            ],
        )?;
        summary.push(format!(
            "{}: b {b}: δ {:.4e} ± {:.1e}, KL {kl:.4e}, bound {bound:.4}",
            em.run_id,
            e.delta,
            3.0 * e.stderr
        ));
    }
    Ok(())
}

fn save_checkpoint<F: Real>(config: &ExperimentConfig, run_id: &str, params: &ParameterSet<F>) -> Result<(), CliError> {
    let Some(dir) = &config.save_checkpoint else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{run_id}.nvck"));
    nvrm::checkpoint::save(&path, params, &[]).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
