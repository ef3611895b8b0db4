//! Adam, minibatch interleaving and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{MatmulPrecision, Tape};
use crate::checkpoint::{load_state, save_checkpoint, TrainState};
use crate::data::{write_atomic, Dataset, SemiUnsupervisedSplit};
use crate::error::{Error, Result};
use crate::evaluation::{attribute_clusters, confusion_and_accuracy};
use crate::models::{
    argmax_rows, LabelledBatch, Likelihood, LossBreakdown, ModelConfig, ModelKind, ModelParams, UnlabelledBatch,
};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update. Fails without touching anything if
    /// any gradient entry is not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if g.shape() != p.value().shape() {
                return Err(Error::dim("adam_step", g.shape(), p.value().shape()));
            }
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} contains {bad}", p.name)));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in store
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let theta = p.value_mut().data_mut();
            for (((th, &gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    fn flat(ts: &[Tensor]) -> Vec<f64> {
        ts.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn assign(ts: &mut [Tensor], flat: &[f64]) -> Result<()> {
        let total: usize = ts.iter().map(Tensor::len).sum();
        if total != flat.len() {
            return Err(Error::dim("adam_restore", &[total], &[flat.len()]));
        }
        let mut off = 0;
        for t in ts {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Row indices drawn from each pool for one optimisation step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
}

/// One epoch of paired minibatches.
///
/// The larger pool (normally the unlabelled one) is visited exactly once in a
/// fresh random order, its last batch possibly partial. The smaller pool is
/// cycled, reshuffled on every pass, always yielding full batches (capped at
/// the pool size).
pub fn minibatch_interleave<R: Rng + ?Sized>(
    n_labelled: usize,
    n_unlabelled: usize,
    batch_labelled: usize,
    batch_unlabelled: usize,
    rng: &mut R,
) -> Result<Vec<Step>> {
    if batch_labelled == 0 || batch_unlabelled == 0 {
        return Err(Error::Config("batch sizes must be positive".into()));
    }
    let steps_u = n_unlabelled.div_ceil(batch_unlabelled);
    let steps_l = n_labelled.div_ceil(batch_labelled);
    let unlabelled_drives = steps_u >= steps_l;
    let steps = steps_u.max(steps_l);

    let mut driver: Vec<usize> = (0..if unlabelled_drives { n_unlabelled } else { n_labelled }).collect();
    driver.shuffle(rng);
    let (n_other, b_drive, b_other) = if unlabelled_drives {
        (n_labelled, batch_unlabelled, batch_labelled)
    } else {
        (n_unlabelled, batch_labelled, batch_unlabelled)
    };
    let mut cycle: Vec<usize> = (0..n_other).collect();
    let mut cursor = n_other;
    let per_step_other = b_other.min(n_other);

    let mut out = Vec::with_capacity(steps);
    for s in 0..steps {
        let lead = driver[s * b_drive..((s + 1) * b_drive).min(driver.len())].to_vec();
        let mut follow = Vec::with_capacity(per_step_other);
        while follow.len() < per_step_other {
            if cursor == n_other {
                cycle.shuffle(rng);
                cursor = 0;
            }
            let take = (per_step_other - follow.len()).min(n_other - cursor);
            follow.extend_from_slice(&cycle[cursor..cursor + take]);
            cursor += take;
        }
        out.push(if unlabelled_drives {
            Step {
                labelled: follow,
                unlabelled: lead,
            }
        } else {
            Step {
                labelled: lead,
                unlabelled: follow,
            }
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub z_dim: usize,
    pub likelihood: Likelihood,
    pub epochs: usize,
    pub batch_size_labelled: usize,
    pub batch_size_unlabelled: usize,
    pub adam: AdamConfig,
    /// Cross-entropy weight; `None` means `0.1 * N_total / N_labelled`.
    pub alpha: Option<f64>,
    pub weight_precision: f64,
    pub seed: u64,
    /// Monte-Carlo samples of `z` per point per step.
    pub mc_samples: usize,
    /// Resample binary pixels from the grey levels every time a batch is drawn.
    pub binarize: bool,
    /// Early-stopping patience in epochs on validation ELBO; 0 disables it.
    pub patience: usize,
    /// Write a resumable checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
    /// Compute training matrix products in `f32` (values stay `f64`).
    pub matmul_f32: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::GmDgm,
            hidden: vec![500, 500],
            z_dim: 100,
            likelihood: Likelihood::Bernoulli,
            epochs: 200,
            batch_size_labelled: 100,
            batch_size_unlabelled: 100,
            adam: AdamConfig::default(),
            alpha: None,
            weight_precision: 1e-3,
            seed: 0,
            mc_samples: 1,
            binarize: false,
            patience: 20,
            checkpoint_every: 10,
            matmul_f32: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(1..=3).contains(&self.hidden.len()) {
            return bad("hidden must list 1 to 3 widths (2 to 4 weight layers)");
        }
        if self.hidden.contains(&0) || self.z_dim == 0 {
            return bad("hidden widths and z_dim must be positive");
        }
        if self.batch_size_labelled == 0 || self.batch_size_unlabelled == 0 || self.mc_samples == 0 {
            return bad("batch sizes and mc_samples must be positive");
        }
        if !(self.adam.lr > 0.0)
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
            || !(self.adam.eps > 0.0)
        {
            return bad("Adam needs lr > 0, beta1 and beta2 in [0, 1), eps > 0");
        }
        if self.alpha.is_some_and(|a| !(a >= 0.0 && a.is_finite())) {
            return bad("alpha must be a finite value >= 0");
        }
        if !(self.weight_precision >= 0.0) {
            return bad("weight_precision must be >= 0");
        }
        if self.binarize && self.likelihood != Likelihood::Bernoulli {
            return bad("binarize requires the bernoulli likelihood");
        }
        Ok(())
    }

    pub fn resolved_alpha(&self, n_total: usize, n_labelled: usize) -> f64 {
        self.alpha.unwrap_or_else(|| {
            if n_labelled == 0 {
                0.0
            } else {
                0.1 * n_total as f64 / n_labelled as f64
            }
        })
    }

    pub fn model_config(&self, split: &SemiUnsupervisedSplit) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            input_dim: split.input_dim(),
            classes: split.total_classes(),
            z_dim: self.z_dim,
            hidden: self.hidden.clone(),
            likelihood: self.likelihood,
        }
    }
}

/// One row of the history file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps of each summed step quantity.
    pub parts: LossBreakdown,
    pub val_elbo: f64,
    pub val_accuracy: f64,
}

pub const HISTORY_HEADER: &str = "epoch,loss,recon,kl_z,log_py,entropy_y,cross_entropy,penalty,val_elbo,val_accuracy";
pub const HISTORY_FILE: &str = "history.csv";

pub fn history_csv(rows: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let p = &r.parts;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            p.loss,
            p.recon,
            p.kl_z,
            p.log_py,
            p.entropy_y,
            p.cross_entropy,
            p.penalty,
            r.val_elbo,
            r.val_accuracy
        );
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Config("history file has an unexpected header".into()));
    }
    lines
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("history row {l:?}: {e}")))?;
            if v.len() != 10 {
                return Err(Error::Config(format!("history row {l:?} has {} fields", v.len())));
            }
            Ok(EpochRecord {
                epoch: v[0] as usize,
                parts: LossBreakdown {
                    loss: v[1],
                    recon: v[2],
                    kl_z: v[3],
                    log_py: v[4],
                    entropy_y: v[5],
                    cross_entropy: v[6],
                    penalty: v[7],
                },
                val_elbo: v[8],
                val_accuracy: v[9],
            })
        })
        .collect()
}

/// Held-out points with ground truth, used to pick the best epoch.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub data: &'a Dataset,
    pub truth: &'a [usize],
    pub k_true: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Run directory for `history.csv` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Resume from this `checkpoint` directory.
    pub resume_from: Option<PathBuf>,
    /// Stop after this epoch as if interrupted (for exercising resume).
    pub stop_after_epoch: Option<usize>,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation ELBO, or the final
    /// epoch when there is no validation set.
    pub model: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_elbo: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

const EVAL_CHUNK: usize = 250;
/// Offset mixed into the run seed for the validation noise stream.
const VALIDATION_STREAM: u64 = 0x76a1_1da7_e000_0001;

fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

fn binarized<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Tensor {
    let data = x.data().iter().map(|&p| f64::from(rng.random::<f64>() < p)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape matches")
}

/// Mean per-point unlabelled ELBO and attributed accuracy on `val`. Uses a
/// fixed noise stream so values are comparable across epochs.
pub fn validate_model(model: &ModelParams, val: &Validation<'_>, seed: u64) -> Result<(f64, f64)> {
    let x = &val.data.features;
    let n = x.rows();
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_STREAM);
    let (k, dz) = (model.classes(), model.z_dim());
    let mut elbo_sum = 0.0;
    let mut pred = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let xb = x.select_rows(&idx);
        let eps = standard_normal(idx.len(), dz, &mut rng).repeat_rows(k);
        let tape = Tape::new();
        let bound = model.store.bind_frozen(&tape);
        let terms = model.elbo_unlabelled(&bound, &xb, &eps)?;
        elbo_sum += terms.elbo.value().sum();
        pred.extend(argmax_rows(&terms.q_y.log_probs.value()));
    }
    let attribution = attribute_clusters(&pred, val.truth, k, val.k_true)?;
    let acc = confusion_and_accuracy(&pred, val.truth, &attribution, val.k_true)?.accuracy;
    Ok((elbo_sum / n as f64, acc))
}

struct Progress {
    best_val: f64,
    best_epoch: usize,
    since_best: usize,
}

/// Trains a model on `split`.
///
/// Only `split.labelled` and `split.unlabelled` are read; unlabelled ground
/// truth never enters this function.
pub fn train(
    split: &SemiUnsupervisedSplit,
    validation: Option<Validation<'_>>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let x_l = &split.labelled.features;
    let y_l = split.labelled_classes();
    let x_u = &split.unlabelled.features;
    let (n_l, n_u) = (x_l.rows(), x_u.rows());
    if n_l + n_u == 0 {
        return Err(Error::Config("training split is empty".into()));
    }
    let alpha = cfg.resolved_alpha(n_l + n_u, n_l);
    let validation = validation.filter(|v| !v.data.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelParams::new(cfg.model_config(split), split.prior.clone(), &mut rng)?;
    let mut adam = AdamState::new(cfg.adam, &model.store);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut progress = Progress {
        best_val: f64::NEG_INFINITY,
        best_epoch: 0,
        since_best: 0,
    };
    let mut best_model: Option<ModelParams> = None;
    let mut start_epoch = 0;

    let out_dir = opts.out_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    if let Some(ck) = &opts.resume_from {
        let state = load_state(ck)?;
        model.store.assign_flat(&state.params)?;
        AdamState::assign(&mut adam.m, &state.adam_m)?;
        AdamState::assign(&mut adam.v, &state.adam_v)?;
        adam.t = state.adam_t;
        rng = state.restore_rng();
        progress = Progress {
            best_val: state.best_val_elbo,
            best_epoch: state.best_epoch,
            since_best: state.epochs_since_best,
        };
        start_epoch = state.epoch;
        let hist_path = ck.join(HISTORY_FILE);
        let text = fs::read_to_string(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
        history = parse_history(&text)?;
        history.truncate(start_epoch);
        let best_dir = ck.with_file_name("best");
        if best_dir.join(crate::checkpoint::STATE_FILE).exists() {
            let mut b = model.clone();
            b.store.assign_flat(&load_state(&best_dir)?.params)?;
            best_model = Some(b);
        }
        info!("resumed from {} at epoch {start_epoch}", ck.display());
    }

    let k = model.classes();
    let dz = model.z_dim();
    let s = cfg.mc_samples;
    let mut stopped_early = false;
    let mut epoch = start_epoch;
    let precision = if cfg.matmul_f32 {
        MatmulPrecision::F32
    } else {
        MatmulPrecision::F64
    };

    while epoch < cfg.epochs {
        epoch += 1;
        let plan = minibatch_interleave(n_l, n_u, cfg.batch_size_labelled, cfg.batch_size_unlabelled, &mut rng)?;
        let mut sums = LossBreakdown::default();
        for step in &plan {
            let labelled = (!step.labelled.is_empty()).then(|| {
                let rows: Vec<usize> = step.labelled.iter().flat_map(|&i| std::iter::repeat_n(i, s)).collect();
                let mut x = x_l.select_rows(&rows);
                let eps = standard_normal(rows.len(), dz, &mut rng);
                if cfg.binarize {
                    x = binarized(&x, &mut rng);
                }
                let labels: Vec<usize> = rows.iter().map(|&i| y_l[i]).collect();
                LabelledBatch {
                    y: Tensor::one_hot(&labels, k).expect("labels index model classes"),
                    x,
                    eps,
                }
            });
            let unlabelled = (!step.unlabelled.is_empty()).then(|| {
                let rows: Vec<usize> = step
                    .unlabelled
                    .iter()
                    .flat_map(|&i| std::iter::repeat_n(i, s))
                    .collect();
                let mut x = x_u.select_rows(&rows);
                let eps = standard_normal(rows.len(), dz, &mut rng);
                if cfg.binarize {
                    x = binarized(&x, &mut rng);
                }
                UnlabelledBatch::with_shared_eps(x, &eps, k)
            });

            let (grads, breakdown) = {
                let tape = Tape::with_precision(precision);
                let bound = model.store.bind(&tape);
                // With several samples per point the data terms are averaged;
                // the penalty is pre-multiplied so that it enters exactly once.
                let out = model
                    .total_loss(
                        &bound,
                        labelled.as_ref(),
                        unlabelled.as_ref(),
                        alpha,
                        cfg.weight_precision * s as f64,
                    )
                    .map_err(|e| Error::Diverged {
                        epoch,
                        detail: e.to_string(),
                    })?;
                let loss = if s > 1 {
                    out.loss.scale(1.0 / s as f64)
                } else {
                    out.loss
                };
                tape.backward(loss)?;
                (bound.grads(), out.breakdown)
            };
            adam.step(&mut model.store, &grads).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
            sums.accumulate(&breakdown.scaled(1.0 / s as f64));
        }
        let parts = sums.scaled(1.0 / plan.len().max(1) as f64);

        let (val_elbo, val_accuracy) = match &validation {
            Some(v) => validate_model(&model, v, cfg.seed)?,
            None => (f64::NAN, f64::NAN),
        };
        history.push(EpochRecord {
            epoch,
            parts,
            val_elbo,
            val_accuracy,
        });
        debug!("epoch {epoch}: {parts:?}");
        info!(
            "{} seed {} epoch {epoch}/{}: loss/step {:.3} val_elbo {:.3} val_acc {:.4}",
            cfg.model, cfg.seed, cfg.epochs, parts.loss, val_elbo, val_accuracy
        );

        let improved = validation.is_some() && val_elbo > progress.best_val;
        if improved {
            progress.best_val = val_elbo;
            progress.best_epoch = epoch;
            progress.since_best = 0;
            best_model = Some(model.clone());
        } else {
            progress.since_best += 1;
        }
        if validation.is_some() && cfg.patience > 0 && progress.since_best >= cfg.patience {
            stopped_early = true;
        }
        let last = epoch == cfg.epochs || stopped_early || opts.stop_after_epoch == Some(epoch);

        if let Some(dir) = out_dir {
            write_atomic(dir.join(HISTORY_FILE), history_csv(&history).as_bytes())?;
            let snapshot = |m: &ModelParams| {
                let (rng_seed, rng_stream, rng_word_pos) = TrainState::capture_rng(&rng);
                TrainState {
                    epoch,
                    adam_t: adam.t,
                    rng_seed,
                    rng_stream,
                    rng_word_pos,
                    best_val_elbo: progress.best_val,
                    best_epoch: progress.best_epoch,
                    epochs_since_best: progress.since_best,
                    params: m.store.flatten(),
                    adam_m: AdamState::flat(&adam.m),
                    adam_v: AdamState::flat(&adam.v),
                }
            };
            if improved {
                save_checkpoint(dir.join("best"), &model, cfg.seed, epoch, Some(&snapshot(&model)))?;
            }
            if last || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
                let ck = dir.join("checkpoint");
                save_checkpoint(&ck, &model, cfg.seed, epoch, Some(&snapshot(&model)))?;
                write_atomic(ck.join(HISTORY_FILE), history_csv(&history).as_bytes())?;
            }
        }
        if stopped_early {
            info!("early stop at epoch {epoch}; best epoch {}", progress.best_epoch);
            break;
        }
        if opts.stop_after_epoch == Some(epoch) {
            break;
        }
    }

    if epoch == 0 {
        if let Some(dir) = out_dir {
            write_atomic(dir.join(HISTORY_FILE), history_csv(&history).as_bytes())?;
        }
    }
    let (model, best_epoch) = match best_model {
        Some(b) => (b, progress.best_epoch),
        None => (model, epoch),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_elbo: progress.best_val,
        epochs_run: epoch,
        stopped_early,
    })
}

/// Reads `history.csv` from a run directory.
pub fn read_history(dir: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = dir.as_ref().join(HISTORY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_history(&text)
}
