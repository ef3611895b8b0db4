//! M2 and the Gaussian-mixture deep generative model (GM-DGM).
//!
//! Both models share the recognition side, `q(y|x) q(z|x,y)`. They differ in
//! the generative side:
//!
//! * M2: `p(x|y,z) p(y) p(z)` with `p(z) = N(0, I)`;
//! * GM-DGM: `p(x|z) p(z|y) p(y)`, a per-class Gaussian in latent space.
//!
//! The unlabelled bound marginalises `y` exactly: every row is expanded into
//! one branch per class, evaluated in a single batched pass, and mixed with
//! the weights `q(y|x)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{
    bernoulli_log_prob, categorical_cross_entropy, categorical_entropy, gaussian_kl, gaussian_log_prob,
    one_hot_indices, reparam_sample, BernoulliVec, Categorical, DiagGaussian,
};
use crate::error::{Error, Result};
use crate::nn::{
    build_mlp, glorot_normal, l2_weight_penalty, Bound, HeadActivation, HeadSpec, Mlp, MlpSpec, ParamId, ParamKind,
    ParamStore,
};
use crate::tensor::Tensor;

/// Class prior `p(y) = Cat(pi)`, stored as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorY {
    log_pi: Vec<f64>,
}

impl PriorY {
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("class prior needs at least one class".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Config(format!(
                "class prior entries must be positive: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class prior sums to {total}, not 1")));
        }
        Ok(Self {
            log_pi: probs.iter().map(|p| p.ln()).collect(),
        })
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::from_probs(&vec![1.0 / classes as f64; classes])
    }

    pub fn log_pi(&self) -> &[f64] {
        &self.log_pi
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_pi.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_pi.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "m2")]
    M2,
    #[serde(rename = "gmdgm")]
    GmDgm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::M2 => "m2",
            ModelKind::GmDgm => "gmdgm",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m2" => Ok(ModelKind::M2),
            "gmdgm" => Ok(ModelKind::GmDgm),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected m2 or gmdgm)"
            ))),
        }
    }
}

/// Observation model `p(x|.)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Bernoulli,
    Gaussian,
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Likelihood::Bernoulli => "bernoulli",
            Likelihood::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Likelihood::Bernoulli),
            "gaussian" => Ok(Likelihood::Gaussian),
            other => Err(Error::Config(format!("unknown likelihood {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Total number of classes, observed plus extra.
    pub classes: usize,
    pub z_dim: usize,
    /// Hidden widths shared by every network.
    pub hidden: Vec<usize>,
    pub likelihood: Likelihood,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.z_dim == 0 {
            return Err(Error::Config(format!(
                "input_dim, classes and z_dim must be positive (got {}, {}, {})",
                self.input_dim, self.classes, self.z_dim
            )));
        }
        Ok(())
    }
}

/// `p(z|y)` as an affine map of one-hot `y` to `(mu, log_var)`.
#[derive(Clone, Copy, Debug)]
struct PriorNet {
    weight: ParamId,
    bias: ParamId,
}

/// Full parameter set of one model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub prior: PriorY,
    pub store: ParamStore,
    encoder_y: Mlp,
    encoder_z: Mlp,
    decoder: Mlp,
    prior_net: Option<PriorNet>,
}

/// Per-row pieces of a labelled bound: `elbo = recon - kl + log_py`.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms<'t> {
    pub elbo: Var<'t>,
    pub recon: Var<'t>,
    pub kl: Var<'t>,
    pub log_py: Var<'t>,
}

/// Per-row pieces of the unlabelled bound, each `q(y|x)`-weighted:
/// `elbo = recon - kl + log_py + entropy`.
#[derive(Clone, Copy, Debug)]
pub struct UnlabelledTerms<'t> {
    pub elbo: Var<'t>,
    pub recon: Var<'t>,
    pub kl: Var<'t>,
    pub log_py: Var<'t>,
    pub entropy: Var<'t>,
    pub q_y: Categorical<'t>,
}

#[derive(Clone, Debug)]
pub struct LabelledBatch {
    pub x: Tensor,
    /// One-hot, `[n, classes]`.
    pub y: Tensor,
    /// `[n, z_dim]` standard-normal draws.
    pub eps: Tensor,
}

#[derive(Clone, Debug)]
pub struct UnlabelledBatch {
    pub x: Tensor,
    /// `[n * classes, z_dim]`; row `i * classes + k` drives class branch `k`
    /// of data row `i`.
    pub eps: Tensor,
}

impl UnlabelledBatch {
    /// Uses the same noise row for every class branch of a data row.
    pub fn with_shared_eps(x: Tensor, eps_rows: &Tensor, classes: usize) -> Self {
        Self {
            x,
            eps: eps_rows.repeat_rows(classes),
        }
    }
}

/// Objective values summed over a step's batches. `loss` is
/// `-(recon - kl_z + log_py + entropy_y) + alpha * cross_entropy + penalty`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub log_py: f64,
    pub entropy_y: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.loss += other.loss;
        self.recon += other.recon;
        self.kl_z += other.kl_z;
        self.log_py += other.log_py;
        self.entropy_y += other.entropy_y;
        self.cross_entropy += other.cross_entropy;
        self.penalty += other.penalty;
    }

    pub fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            loss: self.loss * c,
            recon: self.recon * c,
            kl_z: self.kl_z * c,
            log_py: self.log_py * c,
            entropy_y: self.entropy_y * c,
            cross_entropy: self.cross_entropy * c,
            penalty: self.penalty * c,
        }
    }

    /// Recomputes the loss from its parts.
    pub fn recombine(&self, alpha: f64) -> f64 {
        -(self.recon - self.kl_z + self.log_py + self.entropy_y) + alpha * self.cross_entropy + self.penalty
    }
}

pub struct Loss<'t> {
    pub loss: Var<'t>,
    pub breakdown: LossBreakdown,
}

fn sum_or_zero(v: Option<Var<'_>>) -> f64 {
    v.map_or(0.0, |v| v.value().sum())
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, prior: PriorY, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if prior.len() != config.classes {
            return Err(Error::Config(format!(
                "prior has {} classes but the model has {}",
                prior.len(),
                config.classes
            )));
        }
        let (d, k, dz, hidden) = (config.input_dim, config.classes, config.z_dim, &config.hidden);
        let mut store = ParamStore::new();

        let encoder_y = build_mlp(
            MlpSpec::new(d, hidden, vec![HeadSpec::new("log_probs", k, HeadActivation::Softmax)]),
            "encoder_y",
            &mut store,
            rng,
        )?;
        let encoder_z = build_mlp(
            MlpSpec::new(
                d + k,
                hidden,
                vec![
                    HeadSpec::new("mu", dz, HeadActivation::Linear),
                    HeadSpec::new("log_var", dz, HeadActivation::Linear),
                ],
            ),
            "encoder_z",
            &mut store,
            rng,
        )?;
        let decoder_in = match config.kind {
            ModelKind::M2 => dz + k,
            ModelKind::GmDgm => dz,
        };
        let decoder_heads = match config.likelihood {
            Likelihood::Bernoulli => vec![HeadSpec::new("logits", d, HeadActivation::Linear)],
            Likelihood::Gaussian => vec![
                HeadSpec::new("mean", d, HeadActivation::Linear),
                HeadSpec::new("log_var", d, HeadActivation::Linear),
            ],
        };
        let decoder = build_mlp(
            MlpSpec::new(decoder_in, hidden, decoder_heads),
            "decoder",
            &mut store,
            rng,
        )?;
        let prior_net = match config.kind {
            ModelKind::M2 => None,
            ModelKind::GmDgm => Some(PriorNet {
                weight: store.add("prior_z.weight", ParamKind::Weight, glorot_normal(k, 2 * dz, rng)),
                bias: store.add("prior_z.bias", ParamKind::Bias, Tensor::zeros(&[2 * dz])),
            }),
        };
        Ok(Self {
            config,
            prior,
            store,
            encoder_y,
            encoder_z,
            decoder,
            prior_net,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    /// Shapes of every parameter tensor in flat-list order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .iter()
            .map(|p| (p.name.clone(), p.value().shape().to_vec()))
            .collect()
    }

    fn check_x(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::dim("model input", x.shape(), &[x.rows(), self.config.input_dim]));
        }
        Ok(())
    }

    fn check_one_hot(&self, y: &Tensor, rows: usize) -> Result<()> {
        if y.rank() != 2 || y.rows() != rows || y.cols() != self.config.classes {
            return Err(Error::dim("one-hot labels", y.shape(), &[rows, self.config.classes]));
        }
        one_hot_indices(y).map(|_| ())
    }

    /// `q(y|x)`: the classifier.
    pub fn q_y_given_x<'t>(&self, params: &Bound<'t>, x: &Tensor) -> Result<Categorical<'t>> {
        self.check_x(x)?;
        let xv = params.tape().constant(x.clone());
        self.q_y_var(params, xv)
    }

    fn q_y_var<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Categorical<'t>> {
        let heads = self.encoder_y.forward(params, x)?;
        Ok(Categorical {
            log_probs: heads.expect("log_probs"),
        })
    }

    /// `q(z|x,y)` for one-hot `y` with one row per row of `x`.
    pub fn q_z_given_xy<'t>(&self, params: &Bound<'t>, x: &Tensor, y: &Tensor) -> Result<DiagGaussian<'t>> {
        self.check_x(x)?;
        self.check_one_hot(y, x.rows())?;
        let tape = params.tape();
        self.q_z_split(params, tape.constant(x.clone()), tape.constant(y.clone()), 1)
    }

    fn q_z_split<'t>(&self, params: &Bound<'t>, x: Var<'t>, ys: Var<'t>, repeats: usize) -> Result<DiagGaussian<'t>> {
        let heads = self.encoder_z.forward_split(params, x, ys, repeats)?;
        DiagGaussian::new(heads.expect("mu"), heads.expect("log_var"))
    }

    /// `p(z|y)`; only the GM-DGM has one.
    pub fn p_z_given_y<'t>(&self, params: &Bound<'t>, y: &Tensor) -> Result<DiagGaussian<'t>> {
        self.check_one_hot(y, y.rows())?;
        self.p_z_var(params, params.tape().constant(y.clone()))
    }

    fn p_z_var<'t>(&self, params: &Bound<'t>, ys: Var<'t>) -> Result<DiagGaussian<'t>> {
        let net = self
            .prior_net
            .ok_or_else(|| Error::Contract("M2 has no learned p(z|y); its latent prior is N(0, I)".into()))?;
        let out = ys.affine(params.var(net.weight), params.var(net.bias))?;
        let dz = self.config.z_dim;
        DiagGaussian::new(out.slice_cols(0, dz)?, out.slice_cols(dz, 2 * dz)?)
    }

    /// `log p(x|z)` (GM-DGM) or `log p(x|y,z)` (M2), per row.
    fn log_px<'t>(&self, params: &Bound<'t>, z: Var<'t>, ys: Var<'t>, x_target: Var<'t>) -> Result<Var<'t>> {
        let heads = match self.config.kind {
            ModelKind::GmDgm => self.decoder.forward(params, z)?,
            ModelKind::M2 => self.decoder.forward_split(params, z, ys, 1)?,
        };
        match self.config.likelihood {
            Likelihood::Bernoulli => bernoulli_log_prob(&BernoulliVec::from_logits(heads.expect("logits")), x_target),
            Likelihood::Gaussian => {
                let g = DiagGaussian::new(heads.expect("mean"), heads.expect("log_var"))?;
                gaussian_log_prob(&g, x_target)
            }
        }
    }

    /// Labelled-bound terms for `x` repeated `repeats` times against `ys`.
    fn branch_terms<'t>(
        &self,
        params: &Bound<'t>,
        x: &Tensor,
        ys: &Tensor,
        eps: &Tensor,
        repeats: usize,
    ) -> Result<ElboTerms<'t>> {
        let tape = params.tape();
        let rows = ys.rows();
        if eps.shape() != [rows, self.config.z_dim] {
            return Err(Error::dim("eps", eps.shape(), &[rows, self.config.z_dim]));
        }
        let xv = tape.constant(x.clone());
        let ysv = tape.constant(ys.clone());
        let q = self.q_z_split(params, xv, ysv, repeats)?;
        let z = reparam_sample(&q, tape.constant(eps.clone()))?;
        let target = if repeats == 1 {
            xv
        } else {
            tape.constant(x.repeat_rows(repeats))
        };
        let recon = self.log_px(params, z, ysv, target)?;
        let p = match self.config.kind {
            ModelKind::GmDgm => self.p_z_var(params, ysv)?,
            ModelKind::M2 => DiagGaussian::standard(tape, &[rows, self.config.z_dim]),
        };
        let kl = gaussian_kl(&q, &p)?;
        let idx = one_hot_indices(ys)?;
        let log_py = tape.constant(Tensor::vector(idx.iter().map(|&k| self.prior.log_pi()[k]).collect()));
        let elbo = recon.sub(kl)?.add(log_py)?;
        Ok(ElboTerms {
            elbo,
            recon,
            kl,
            log_py,
        })
    }

    /// `ELBO(x, y) = E_q(z|x,y)[log p(x|.)] - KL(q(z|x,y) || p(z|.)) + log p(y)`
    /// with one reparameterised sample per row.
    pub fn elbo_labelled<'t>(&self, params: &Bound<'t>, x: &Tensor, y: &Tensor, eps: &Tensor) -> Result<ElboTerms<'t>> {
        self.check_x(x)?;
        self.check_one_hot(y, x.rows())?;
        self.branch_terms(params, x, y, eps, 1)
    }

    /// `ELBO(x) = sum_y q(y|x) ELBO(x, y) + H(q(y|x))`, marginalising every class.
    pub fn elbo_unlabelled<'t>(&self, params: &Bound<'t>, x: &Tensor, eps: &Tensor) -> Result<UnlabelledTerms<'t>> {
        self.check_x(x)?;
        let q_y = self.q_y_var(params, params.tape().constant(x.clone()))?;
        self.elbo_unlabelled_with(params, x, eps, q_y)
    }

    /// The unlabelled bound under a caller-supplied `q(y|x)`.
    pub fn elbo_unlabelled_with<'t>(
        &self,
        params: &Bound<'t>,
        x: &Tensor,
        eps: &Tensor,
        q_y: Categorical<'t>,
    ) -> Result<UnlabelledTerms<'t>> {
        self.check_x(x)?;
        let (n, k) = (x.rows(), self.config.classes);
        if q_y.log_probs.shape() != [n, k] {
            return Err(Error::dim("q(y|x)", &q_y.log_probs.shape(), &[n, k]));
        }
        let labels: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
        let ys = Tensor::one_hot(&labels, k)?;
        let branch = self.branch_terms(params, x, &ys, eps, k)?;

        // q(y|x) may contain exact zeros (forced one-hot); those branches must
        // not contribute even if their terms are large.
        let probs = q_y.log_probs.exp();
        let weigh = |v: Var<'t>| -> Result<Var<'t>> { Ok(v.reshape(&[n, k])?.mul(probs)?.sum_rows()) };
        let recon = weigh(branch.recon)?;
        let kl = weigh(branch.kl)?;
        let log_py = weigh(branch.log_py)?;
        let entropy = categorical_entropy(&q_y)?;
        let elbo = recon.sub(kl)?.add(log_py)?.add(entropy)?;
        Ok(UnlabelledTerms {
            elbo,
            recon,
            kl,
            log_py,
            entropy,
            q_y,
        })
    }

    /// Minimised objective:
    /// `-sum_u ELBO(x_u) - sum_l [ELBO(x_l, y_l) - alpha * CE(y_l, q(y|x_l))] + penalty`.
    ///
    /// Either batch may be absent or empty.
    pub fn total_loss<'t>(
        &self,
        params: &Bound<'t>,
        labelled: Option<&LabelledBatch>,
        unlabelled: Option<&UnlabelledBatch>,
        alpha: f64,
        weight_precision: f64,
    ) -> Result<Loss<'t>> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        let tape = params.tape();
        let penalty = l2_weight_penalty(&self.store, params, tape, weight_precision)?;
        let mut loss = penalty;
        let mut bd = LossBreakdown {
            penalty: penalty.item(),
            ..Default::default()
        };

        if let Some(lb) = labelled.filter(|b| b.x.rows() > 0) {
            let terms = self.elbo_labelled(params, &lb.x, &lb.y, &lb.eps)?;
            let q_y = self.q_y_given_x(params, &lb.x)?;
            let ce = categorical_cross_entropy(&q_y, &lb.y)?.sum();
            loss = loss.sub(terms.elbo.sum())?.add(ce.scale(alpha))?;
            bd.recon += sum_or_zero(Some(terms.recon));
            bd.kl_z += sum_or_zero(Some(terms.kl));
            bd.log_py += sum_or_zero(Some(terms.log_py));
            bd.cross_entropy += ce.item();
        }
        if let Some(ub) = unlabelled.filter(|b| b.x.rows() > 0) {
            let terms = self.elbo_unlabelled(params, &ub.x, &ub.eps)?;
            loss = loss.sub(terms.elbo.sum())?;
            bd.recon += sum_or_zero(Some(terms.recon));
            bd.kl_z += sum_or_zero(Some(terms.kl));
            bd.log_py += sum_or_zero(Some(terms.log_py));
            bd.entropy_y += sum_or_zero(Some(terms.entropy));
        }
        bd.loss = loss.item();
        if !bd.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {}", bd.loss)));
        }
        Ok(Loss { loss, breakdown: bd })
    }

    /// `log q(y|x)` for a whole dataset, evaluated in chunks without gradients.
    pub fn predict_log_probs(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_x(x)?;
        let (n, k) = (x.rows(), self.config.classes);
        let mut out = Vec::with_capacity(n * k);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let tape = Tape::new();
            let bound = self.store.bind_frozen(&tape);
            let c = self.q_y_given_x(&bound, &x.select_rows(&idx))?;
            out.extend_from_slice(c.log_probs.value().data());
        }
        Tensor::new(vec![n, k], out)
    }

    /// Recognition means `mu_phi(x, y)` for the given class per row.
    pub fn latent_means(&self, x: &Tensor, classes: &[usize], chunk: usize) -> Result<Tensor> {
        self.check_x(x)?;
        let (n, dz) = (x.rows(), self.config.z_dim);
        let mut out = Vec::with_capacity(n * dz);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let tape = Tape::new();
            let bound = self.store.bind_frozen(&tape);
            let y = Tensor::one_hot(&classes[start..end], self.config.classes)?;
            let q = self.q_z_given_xy(&bound, &x.select_rows(&idx), &y)?;
            out.extend_from_slice(q.mu.value().data());
        }
        Tensor::new(vec![n, dz], out)
    }
}

/// Row-wise argmax, ties to the lower index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
