//! Experiment configuration and the train/eval drivers behind the CLI.
//!
//! A config is a TOML file with four tables, `[data]`, `[split]`, `[train]`
//! and `[output]`. Every key has a default and unknown keys are rejected.
//! The resolved config (defaults filled in, seed fixed) is written into each
//! run directory, so `train --config run_03/config.toml` replays that run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, read_manifest};
use crate::data::{
    build_semi_unsupervised_split, hold_out, load_idx, read_features_csv, synthetic_activity_dataset, write_atomic,
    Dataset, FeatureStats, PriorMasses, SemiUnsupervisedSplit, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::models::{Likelihood, ModelKind, ModelParams};
use crate::training::{train, AdamConfig, TrainConfig, TrainOptions, TrainOutcome, Validation};

/// The bundled configuration for the MNIST semi-unsupervised protocol.
pub const MNIST_SEMIUNSUP_CFG: &str = include_str!("../configs/mnist_semiunsup.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding the four standard MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Use a random subset of this many training images (0 = all).
    pub train_subset: usize,
    /// Use a random subset of this many test images (0 = all).
    pub test_subset: usize,
    /// Seed for subset selection, shared by all repeats.
    pub subset_seed: u64,
    /// Points carved out of the training data to pick the best epoch and run.
    pub validation_size: usize,
    /// For sources without a separate test file: points held out for testing.
    pub test_size: usize,
    /// Standardise features with training-split statistics.
    pub standardize: bool,
    pub synthetic_windows: usize,
    pub synthetic_classes: usize,
    /// Frequency ratio between the commonest and rarest class.
    pub synthetic_imbalance: f64,
    pub synthetic_features: usize,
    pub synthetic_separation: f64,
    /// Seed for the synthetic generator, shared by all repeats.
    pub synthetic_seed: u64,
    pub csv_train: PathBuf,
    pub csv_test: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            train_subset: 0,
            test_subset: 0,
            subset_seed: 0,
            validation_size: 5000,
            test_size: 0,
            standardize: false,
            synthetic_windows: 10_000,
            synthetic_classes: 8,
            synthetic_imbalance: 80.0,
            synthetic_features: SyntheticSpec::DEFAULT_FEATURES,
            synthetic_separation: 1.0,
            synthetic_seed: 0,
            csv_train: PathBuf::new(),
            csv_test: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub semi_supervised: Vec<usize>,
    pub unsupervised: Vec<usize>,
    pub labels_per_class: usize,
    pub extra_classes: usize,
    pub prior_semi_supervised: Option<f64>,
    pub prior_unsupervised: Option<f64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::mnist_default();
        Self {
            semi_supervised: s.semi_supervised,
            unsupervised: s.unsupervised,
            labels_per_class: s.labels_per_class,
            extra_classes: s.extra_classes,
            prior_semi_supervised: None,
            prior_unsupervised: None,
        }
    }
}

impl SplitSection {
    pub fn spec(&self) -> SplitSpec {
        SplitSpec {
            semi_supervised: self.semi_supervised.clone(),
            unsupervised: self.unsupervised.clone(),
            labels_per_class: self.labels_per_class,
            extra_classes: self.extra_classes,
            masses: PriorMasses {
                semi_supervised_each: self.prior_semi_supervised,
                unsupervised_each: self.prior_unsupervised,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub z_dim: usize,
    pub likelihood: Likelihood,
    pub epochs: usize,
    pub batch_size_labelled: usize,
    pub batch_size_unlabelled: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub alpha: Option<f64>,
    pub weight_precision: f64,
    pub seed: u64,
    pub mc_samples: usize,
    pub binarize: bool,
    pub patience: usize,
    pub checkpoint_every: usize,
    pub matmul_f32: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: t.model,
            hidden: t.hidden,
            z_dim: t.z_dim,
            likelihood: t.likelihood,
            epochs: t.epochs,
            batch_size_labelled: t.batch_size_labelled,
            batch_size_unlabelled: t.batch_size_unlabelled,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            alpha: t.alpha,
            weight_precision: t.weight_precision,
            seed: t.seed,
            mc_samples: t.mc_samples,
            binarize: t.binarize,
            patience: t.patience,
            checkpoint_every: t.checkpoint_every,
            matmul_f32: t.matmul_f32,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model,
            hidden: self.hidden.clone(),
            z_dim: self.z_dim,
            likelihood: self.likelihood,
            epochs: self.epochs,
            batch_size_labelled: self.batch_size_labelled,
            batch_size_unlabelled: self.batch_size_unlabelled,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            alpha: self.alpha,
            weight_precision: self.weight_precision,
            seed: self.seed,
            mc_samples: self.mc_samples,
            binarize: self.binarize,
            patience: self.patience,
            checkpoint_every: self.checkpoint_every,
            matmul_f32: self.matmul_f32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMode {
    /// Fit the cluster-to-class map on the test set, as published.
    Test,
    /// Fit it on the validation carve-out instead.
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub repeats: usize,
    pub attribution: AttributionMode,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/experiment"),
            repeats: 1,
            attribution: AttributionMode::Test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub split: SplitSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn mnist_semiunsup() -> Self {
        Self::parse(MNIST_SEMIUNSUP_CFG).expect("bundled config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.to_train_config().validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("[train] {m}")),
            other => other,
        })?;
        if self.output.repeats == 0 {
            return Err(Error::Config("[output] repeats must be at least 1".into()));
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic
                if d.synthetic_classes < 2 || d.synthetic_windows == 0 || d.synthetic_features == 0 =>
            {
                return Err(Error::Config(
                    "[data] synthetic_classes must be >= 2 and synthetic_windows, synthetic_features positive".into(),
                ))
            }
            DataSource::Synthetic if !(d.synthetic_imbalance >= 1.0) => {
                return Err(Error::Config("[data] synthetic_imbalance must be >= 1".into()))
            }
            DataSource::Csv if d.csv_train.as_os_str().is_empty() => {
                return Err(Error::Config(
                    "[data] csv_train is required for source = \"csv\"".into(),
                ))
            }
            _ => {}
        }
        if self.split.semi_supervised.is_empty() && self.split.unsupervised.is_empty() {
            return Err(Error::Config("[split] lists no classes".into()));
        }
        Ok(())
    }
}

/// Training split plus the held-out sets, all in original class indices.
pub struct PreparedData {
    pub split: SemiUnsupervisedSplit,
    pub validation: Dataset,
    pub validation_truth: Vec<usize>,
    pub test: Dataset,
    pub test_truth: Vec<usize>,
    pub class_names: Vec<String>,
}

fn subset(ds: Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n >= ds.len() {
        return Ok(ds);
    }
    Ok(hold_out(&ds, n, &mut ChaCha8Rng::seed_from_u64(seed))?.1)
}

/// Loads the source named in `cfg.data` and builds the split for `seed`.
/// Held-out sets depend only on the data settings, never on `seed`.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let d = &cfg.data;
    let (train_all, test) = match d.source {
        DataSource::Mnist => {
            let dir = &d.mnist_dir;
            let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            (
                subset(train, d.train_subset, d.subset_seed)?,
                subset(test, d.test_subset, d.subset_seed.wrapping_add(1))?,
            )
        }
        DataSource::Synthetic => {
            let mut spec = SyntheticSpec::new(d.synthetic_windows, d.synthetic_classes, d.synthetic_imbalance);
            spec.d_features = d.synthetic_features;
            spec.separation = d.synthetic_separation;
            let mut rng = ChaCha8Rng::seed_from_u64(d.synthetic_seed);
            let all = synthetic_activity_dataset(&spec, &mut rng)?;
            let (train, test) = hold_out(&all, d.test_size, &mut rng)?;
            (train, test)
        }
        DataSource::Csv => {
            let train = read_features_csv(&d.csv_train)?;
            match &d.csv_test {
                Some(p) => (train, read_features_csv(p)?),
                None => hold_out(&train, d.test_size, &mut ChaCha8Rng::seed_from_u64(d.subset_seed))?,
            }
        }
    };
    let (mut train, mut validation) = hold_out(
        &train_all,
        d.validation_size,
        &mut ChaCha8Rng::seed_from_u64(d.subset_seed.wrapping_add(2)),
    )?;
    let mut test = test;
    if d.standardize {
        let stats = FeatureStats::fit(&train);
        train = stats.transform(&train)?;
        validation = stats.transform(&validation)?;
        test = stats.transform(&test)?;
    }
    let class_names = train_all.class_names.clone();
    let split = build_semi_unsupervised_split(&train, &cfg.split.spec(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    if cfg.train.likelihood == Likelihood::Bernoulli && train.features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config(
            "the bernoulli likelihood needs features in [0, 1]; use likelihood = \"gaussian\"".into(),
        ));
    }
    Ok(PreparedData {
        validation_truth: validation.truth()?,
        test_truth: test.truth()?,
        split,
        validation,
        test,
        class_names,
    })
}

/// Result of one seeded repeat.
pub struct RunResult {
    pub name: String,
    pub seed: u64,
    pub dir: Option<PathBuf>,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    pub val_accuracy: f64,
}

pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    /// Index into `runs` of the best run by validation ELBO.
    pub best: usize,
}

impl ExperimentResult {
    pub fn best_run(&self) -> &RunResult {
        &self.runs[self.best]
    }
}

fn select_best(runs: &[RunResult]) -> usize {
    let key = |r: &RunResult| {
        let v = r.outcome.best_val_elbo;
        if v.is_finite() {
            v
        } else {
            r.outcome.history.last().map_or(f64::NEG_INFINITY, |h| -h.parts.loss)
        }
    };
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if key(r) > key(&runs[best]) {
            best = i;
        }
    }
    best
}

/// Evaluates a trained model on the prepared test set.
pub fn evaluate_prepared(model: &ModelParams, data: &PreparedData, mode: AttributionMode) -> Result<EvalReport> {
    let validation = match mode {
        AttributionMode::Test => None,
        AttributionMode::Validation => Some((&data.validation.features, data.validation_truth.as_slice())),
    };
    evaluate(
        model,
        &data.test.features,
        &data.test_truth,
        &data.class_names,
        validation,
    )
}

/// Runs every repeat of `cfg`. With `write` set, artifacts go to
/// `cfg.output.dir`: one `run_XX` directory per repeat, `summary.csv` and
/// `best_run.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, write: bool) -> Result<ExperimentResult> {
    cfg.validate()?;
    let root = &cfg.output.dir;
    if write {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    let mut runs = Vec::with_capacity(cfg.output.repeats);
    for i in 0..cfg.output.repeats {
        let seed = cfg.train.seed.wrapping_add(i as u64);
        let name = format!("run_{i:02}");
        let data = prepare_data(cfg, seed)?;
        let mut resolved = cfg.clone();
        resolved.train.seed = seed;
        resolved.output.repeats = 1;
        let dir = write.then(|| root.join(&name));
        if let Some(dir) = &dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            resolved.output.dir = dir.clone();
            write_atomic(dir.join("config.toml"), resolved.to_toml().as_bytes())?;
        }
        info!(
            "{name}: {} seed {seed}, {} labelled / {} unlabelled, {} classes",
            cfg.train.model,
            data.split.labelled.len(),
            data.split.unlabelled.len(),
            data.split.total_classes()
        );
        let validation = Validation {
            data: &data.validation,
            truth: &data.validation_truth,
            k_true: data.class_names.len(),
        };
        let outcome = train(
            &data.split,
            Some(validation),
            &resolved.train.to_train_config(),
            &TrainOptions {
                out_dir: dir.clone(),
                ..Default::default()
            },
        )?;
        let report = evaluate_prepared(&outcome.model, &data, cfg.output.attribution)?;
        let val_accuracy = outcome
            .history
            .iter()
            .find(|h| h.epoch == outcome.best_epoch)
            .map_or(f64::NAN, |h| h.val_accuracy);
        if let Some(dir) = &dir {
            report.write(dir.join("eval"))?;
        }
        info!(
            "{name}: test accuracy {:.4}, best epoch {}",
            report.accuracy, outcome.best_epoch
        );
        runs.push(RunResult {
            name,
            seed,
            dir,
            outcome,
            report,
            val_accuracy,
        });
    }
    let best = select_best(&runs);
    if write {
        write_atomic(root.join("summary.csv"), summary_csv(&runs).as_bytes())?;
        let b = &runs[best];
        let marker = format!(
            "run = {}\nseed = {}\nselected_by = validation_elbo\nval_elbo = {}\nval_accuracy = {}\ntest_accuracy = {}\n",
            b.name, b.seed, b.outcome.best_val_elbo, b.val_accuracy, b.report.accuracy
        );
        write_atomic(root.join("best_run.txt"), marker.as_bytes())?;
    }
    Ok(ExperimentResult { runs, best })
}

pub fn summary_csv(runs: &[RunResult]) -> String {
    let mut s = String::from(
        "run,seed,best_epoch,val_elbo,val_accuracy,test_accuracy,ch_score,prior_collapse,one_class_collapse\n",
    );
    for r in runs {
        let ch = r.report.ch_score.as_ref().map_or(f64::NAN, |v| *v);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.name,
            r.seed,
            r.outcome.best_epoch,
            r.outcome.best_val_elbo,
            r.val_accuracy,
            r.report.accuracy,
            ch,
            r.report.collapse.prior_collapse,
            r.report.collapse.one_class_collapse
        );
    }
    s
}

/// Loads a checkpoint, checks it against `cfg`, and writes
/// `metrics.txt`, `confusion.csv` and `latents.csv` into `out`.
pub fn run_eval(checkpoint: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let manifest = read_manifest(checkpoint)?;
    if manifest.config.kind != cfg.train.model {
        return Err(Error::Config(format!(
            "checkpoint holds a {} model but the configuration asks for {}",
            manifest.config.kind, cfg.train.model
        )));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let data = prepare_data(cfg, manifest.seed)?;
    if model.config.input_dim != data.test.dim() || model.classes() != data.split.total_classes() {
        return Err(Error::Config(format!(
            "checkpoint expects {} features and {} classes; the data provide {} and {}",
            model.config.input_dim,
            model.classes(),
            data.test.dim(),
            data.split.total_classes()
        )));
    }
    let report = evaluate_prepared(&model, &data, cfg.output.attribution)?;
    report.write(out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_reproduces_the_mnist_protocol() {
        let cfg = ExperimentConfig::mnist_semiunsup();
        let spec = cfg.split.spec();
        assert_eq!(spec.semi_supervised, vec![0, 1, 2, 8, 9]);
        assert_eq!(spec.unsupervised, vec![3, 4, 5, 6, 7]);
        assert_eq!(spec.labels_per_class * spec.semi_supervised.len(), 500);
        assert_eq!(
            spec.semi_supervised.len() + spec.unsupervised.len() + spec.extra_classes,
            15
        );
        assert_eq!(cfg.train.hidden, vec![500, 500]);
        assert_eq!(cfg.train.z_dim, 100);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_field_name() {
        let err = ExperimentConfig::parse("[train]\nepohcs = 3\n").unwrap_err();
        assert!(err.to_string().contains("epohcs"), "{err}");
        let err = ExperimentConfig::parse("[train]\nhidden = []\n").unwrap_err();
        assert!(err.to_string().contains("[train]"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.alpha = Some(2.5);
        cfg.data.csv_test = Some("x.csv".into());
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
