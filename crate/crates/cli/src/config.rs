//! Experiment configuration files.
//!
//! A config is one JSON object. Command-line flags override the `seed`,
//! `trials`, `output`, `format` and `precision` fields after parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nvrm::continual::{ContinualConfig, EwcConfig, TaskSpec};
use nvrm::data::Corruption;
use nvrm::model::FcnConfig;
use nvrm::train::{OptimizerConfig, TrainConfig};
use nvrm::Precision;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Continual,
    Robustness,
    NvEstimate,
    GradCheck,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Continual => "continual",
            ExperimentKind::Robustness => "robustness",
            ExperimentKind::NvEstimate => "nv-estimate",
            ExperimentKind::GradCheck => "grad-check",
        }
    }

    /// Kinds that train (or load) a single-task classifier first.
    fn trains_classifier(self) -> bool {
        matches!(self, ExperimentKind::Train | ExperimentKind::Robustness | ExperimentKind::NvEstimate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(format!("unknown format `{other}` (expected csv or jsonl)")),
        }
    }
}

/// Where the four IDX files live.
///
/// Each explicit path wins over `dir`; `dir` falls back to `NV_DATA_DIR`.
/// Missing file names default to the standard MNIST ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// Subtract the training-set mean of every pixel.
    #[serde(default)]
    pub normalize: bool,
}

pub struct ResolvedPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    pub fn resolve(&self, env_dir: Option<PathBuf>) -> Result<ResolvedPaths, CliError> {
        let dir = self.dir.clone().or(env_dir);
        let pick = |explicit: &Option<PathBuf>, file: &str| -> Result<PathBuf, CliError> {
            match (explicit, &dir) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(d)) => Ok(d.join(file)),
                (None, None) => Err(CliError::Config(format!(
                    "data: no path for {file}; set data.dir or NV_DATA_DIR"
                ))),
            }
        };
        Ok(ResolvedPaths {
            train_images: pick(&self.train_images, "train-images-idx3-ubyte")?,
            train_labels: pick(&self.train_labels, "train-labels-idx1-ubyte")?,
            test_images: pick(&self.test_images, "t10k-images-idx3-ubyte")?,
            test_labels: pick(&self.test_labels, "t10k-labels-idx1-ubyte")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualSection {
    pub tasks: TaskSpec,
    #[serde(default = "one")]
    pub epochs_per_task: usize,
    #[serde(default)]
    pub ewc: Option<EwcConfig>,
    #[serde(default)]
    pub fresh_optimizer_per_task: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSection {
    pub scales: Vec<f64>,
    /// Noise draws per scale.
    #[serde(default = "ten")]
    pub noise_trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NvSection {
    pub b: Vec<f64>,
    #[serde(default = "thirty_two")]
    pub samples: usize,
    /// Prior standard deviation; defaults to `1/√weight_decay`.
    #[serde(default)]
    pub prior_sigma: Option<f64>,
    /// `Δ` of the PAC-Bayes bound.
    #[serde(default = "five_percent")]
    pub confidence: f64,
    /// Estimate on the first `n` training examples only.
    #[serde(default)]
    pub eval_subset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    #[serde(default = "hundred")]
    pub cases: usize,
    #[serde(default = "fd_step")]
    pub h: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            cases: hundred(),
            h: fd_step(),
        }
    }
}

fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn thirty_two() -> usize {
    32
}
fn hundred() -> usize {
    100
}
fn five_percent() -> f64 {
    0.05
}
fn fd_step() -> f64 {
    1e-5
}
fn default_batch() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub model: Option<FcnConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub lr_decay_period: Option<usize>,
    #[serde(default)]
    pub corruption: Corruption,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub continual: Option<ContinualSection>,
    #[serde(default)]
    pub robustness: Option<RobustnessSection>,
    #[serde(default)]
    pub nv: Option<NvSection>,
    #[serde(default)]
    pub grad_check: Option<GradCheckSection>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Format>,
    #[serde(default)]
    pub precision: Precision,
    /// Directory receiving one `<run_id>.nvck` per trial.
    #[serde(default)]
    pub save_checkpoint: Option<PathBuf>,
    /// Evaluate these weights instead of training (robustness, nv-estimate).
    #[serde(default)]
    pub load_checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Every problem with the config, one `field: reason` line each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let kind = self.kind;
        if self.seed.is_none() {
            out.push("seed: required (in the config or via --seed)".into());
        }
        if self.trials == 0 {
            out.push("trials: must be at least 1".into());
        }
        if self.output.is_none() {
            out.push("output: required (in the config or via --out)".into());
        }
        if self.load_checkpoint.is_some() && !matches!(kind, ExperimentKind::Robustness | ExperimentKind::NvEstimate) {
            out.push("load_checkpoint: only robustness and nv-estimate runs can start from a checkpoint".into());
        }
        if kind == ExperimentKind::GradCheck {
            let g = self.grad_check.clone().unwrap_or_default();
            if g.cases == 0 {
                out.push("grad_check.cases: must be at least 1".into());
            }
            if !(g.h > 0.0 && g.h.is_finite()) {
                out.push(format!("grad_check.h: must be positive, got {}", g.h));
            }
            return out;
        }

        match &self.model {
            None => out.push("model: required".into()),
            Some(m) => {
                if let Err(e) = m.validate() {
                    out.push(format!("model: {}", strip(e)));
                }
            }
        }
        let trains = self.load_checkpoint.is_none();
        match &self.optimizer {
            None if trains => out.push("optimizer: required".into()),
            None => {}
            Some(o) => out.extend(o.problems()),
        }
        if trains {
            if self.batch_size == 0 {
                out.push("batch_size: must be at least 1".into());
            }
            if kind != ExperimentKind::Continual && self.epochs == 0 {
                out.push("epochs: must be at least 1".into());
            }
        }
        if self.lr_decay_period == Some(0) {
            out.push("lr_decay_period: must be at least 1 when set".into());
        }
        if self.train_subset == Some(0) {
            out.push("train_subset: must be at least 1 when set".into());
        }
        if let Err(e) = self.corruption.validate() {
            out.push(format!("corruption: {}", strip(e)));
        }

        match kind {
            ExperimentKind::Continual => match &self.continual {
                None => out.push("continual: required for continual runs".into()),
                Some(c) => {
                    if c.epochs_per_task == 0 {
                        out.push("continual.epochs_per_task: must be at least 1".into());
                    }
                    if let Some(ewc) = &c.ewc {
                        if !(ewc.lambda >= 0.0 && ewc.lambda.is_finite()) {
                            out.push(format!("continual.ewc.lambda: must be finite and non-negative, got {}", ewc.lambda));
                        }
                        if ewc.fisher_samples == 0 {
                            out.push("continual.ewc.fisher_samples: must be at least 1".into());
                        }
                    }
                    if self.corruption != Corruption::None {
                        out.push("corruption: not supported for continual runs".into());
                    }
                    if self.lr_decay_period.is_some() {
                        out.push("lr_decay_period: not supported for continual runs".into());
                    }
                }
            },
            ExperimentKind::Robustness => match &self.robustness {
                None => out.push("robustness: required for robustness runs".into()),
                Some(r) => {
                    if r.scales.is_empty() {
                        out.push("robustness.scales: must not be empty".into());
                    }
                    if r.scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                        out.push("robustness.scales: must be finite and non-negative".into());
                    }
                    if r.scales.windows(2).any(|w| !(w[0] < w[1])) {
                        out.push("robustness.scales: must be strictly increasing".into());
                    }
                    if r.noise_trials == 0 {
                        out.push("robustness.noise_trials: must be at least 1".into());
                    }
                }
            },
            ExperimentKind::NvEstimate => match &self.nv {
                None => out.push("nv: required for nv-estimate runs".into()),
                Some(nv) => {
                    if nv.b.is_empty() || nv.b.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
                        out.push("nv.b: must be a non-empty list of positive scales".into());
                    }
                    if nv.samples < 2 {
                        out.push("nv.samples: must be at least 2".into());
                    }
                    match nv.prior_sigma {
                        Some(s) if !(s > 0.0 && s.is_finite()) => {
                            out.push(format!("nv.prior_sigma: must be positive, got {s}"))
                        }
                        None if self.optimizer.map_or(0.0, |o| o.weight_decay) <= 0.0 => out.push(
                            "nv.prior_sigma: required unless optimizer.weight_decay is positive".into(),
                        ),
                        _ => {}
                    }
                    if !(nv.confidence > 0.0 && nv.confidence < 1.0) {
                        out.push(format!("nv.confidence: must lie in (0, 1), got {}", nv.confidence));
                    }
                    if nv.eval_subset == Some(0) {
                        out.push("nv.eval_subset: must be at least 1 when set".into());
                    }
                }
            },
            ExperimentKind::Train | ExperimentKind::GradCheck => {}
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Invalid(p))
        }
    }

    /// First 12 hex digits of the SHA-256 of the config with the per-invocation
    /// fields (seed, trial count, output location and format) removed.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("config is an object");
        for key in ["seed", "trials", "output", "format", "save_checkpoint"] {
            map.remove(key);
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-{}-s{seed}", self.kind.as_str(), self.hash())
    }

    /// Seeds of every trial: `base, base + 1, ...`.
    pub fn trial_seeds(&self) -> Vec<u64> {
        let base = self.seed.unwrap_or(0);
        (0..self.trials as u64).map(|i| base.wrapping_add(i)).collect()
    }

    /// Explicit format, else `.jsonl` extension, else CSV.
    pub fn resolved_format(&self) -> Format {
        self.format.unwrap_or_else(|| match self.output.as_ref().and_then(|p| p.extension()) {
            Some(ext) if ext == "jsonl" => Format::Jsonl,
            _ => Format::Csv,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone().expect("validated"),
            optimizer: self.optimizer.expect("validated"),
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_decay_period: self.lr_decay_period,
            corruption: self.corruption,
            train_subset: self.train_subset,
        }
    }

    pub fn continual_config(&self) -> ContinualConfig {
        let c = self.continual.clone().expect("validated");
        ContinualConfig {
            model: self.model.clone().expect("validated"),
            optimizer: self.optimizer.expect("validated"),
            batch_size: self.batch_size,
            epochs_per_task: c.epochs_per_task,
            tasks: c.tasks,
            ewc: c.ewc,
            fresh_optimizer_per_task: c.fresh_optimizer_per_task,
            train_subset: self.train_subset,
        }
    }

    pub fn needs_data(&self) -> bool {
        self.kind != ExperimentKind::GradCheck
    }

    pub fn trains_classifier(&self) -> bool {
        self.kind.trains_classifier() && self.load_checkpoint.is_none()
    }
}

fn strip(e: nvrm::Error) -> String {
    match e {
        nvrm::Error::Config(s) => s,
        other => other.to_string(),
    }
}
