//! Fast invariant checks: oracles that catch broken maths in seconds.
//!
//! Each check is a plain function returning the measured discrepancy so the
//! acceptance suite can print numbers; [`run_selftest`] wraps them with
//! thresholds and names.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::distributions::{self, gaussian_log_prob, Categorical, DiagGaussian};
use crate::error::Result;
use crate::evaluation::calinski_harabasz;
use crate::gradcheck::{self, GradCheckReport};
use crate::models::{LabelledBatch, Likelihood, ModelConfig, ModelKind, ModelParams, PriorY, UnlabelledBatch};
use crate::nn::Bound;
use crate::tensor::Tensor;

/// Signature of the closed-form Gaussian KL.
pub type KlFn = for<'t> fn(&DiagGaussian<'t>, &DiagGaussian<'t>) -> Result<Var<'t>>;

/// Replaceable pieces, so that a deliberately broken implementation can be
/// shown to fail the suite.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub gaussian_kl: KlFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Self {
            gaussian_kl: distributions::gaussian_kl,
        }
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
    .expect("shape matches")
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random::<f64>()).collect(),
    )
    .expect("shape matches")
}

/// A small model (`D=6, K=3, d_z=2`, one hidden layer of 5) with a random
/// positive prior.
pub fn toy_model(kind: ModelKind, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let prior = PriorY::from_probs(&raw.iter().map(|r| r / total).collect::<Vec<_>>())?;
    let config = ModelConfig {
        kind,
        input_dim: 6,
        classes: 3,
        z_dim: 2,
        hidden: vec![5],
        likelihood: Likelihood::Bernoulli,
    };
    ModelParams::new(config, prior, rng)
}

/// Largest `|ELBO(x) - [sum_y q(y|x) ELBO(x,y) + H(q(y|x))]|` over
/// `models` random toy models (alternating M2 and GM-DGM), four rows each,
/// with the same noise for every class branch.
pub fn marginalisation_gap(models: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for m in 0..models {
        let kind = if m % 2 == 0 { ModelKind::GmDgm } else { ModelKind::M2 };
        let model = toy_model(kind, &mut rng)?;
        let x = uniform(4, 6, &mut rng);
        let eps = normal(&[4, 2], &mut rng);
        let tape = Tape::new();
        let bound = model.store.bind_frozen(&tape);
        let marginal = model.elbo_unlabelled(&bound, &x, &eps.repeat_rows(3))?.elbo.value();
        let q = model.q_y_given_x(&bound, &x)?;
        let probs = q.probs();
        let entropy = distributions::categorical_entropy(&q)?.value();
        let mut explicit = entropy.data().to_vec();
        for k in 0..3 {
            let y = Tensor::one_hot(&[k; 4], 3)?;
            let l = model.elbo_labelled(&bound, &x, &y, &eps)?.elbo.value();
            for (i, e) in explicit.iter_mut().enumerate() {
                *e += probs.get(i, k) * l.data()[i];
            }
        }
        for (a, b) in marginal.data().iter().zip(&explicit) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct KlOracleReport {
    pub pairs: usize,
    /// Pairs whose closed form lies more than three standard errors from the
    /// Monte-Carlo mean.
    pub outside: usize,
    /// Largest `|closed - mc| / se`.
    pub worst_z: f64,
}

/// Compares `kl` against `mean(log q(z) - log p(z))` over `samples` draws
/// from `q`, for `pairs` random diagonal Gaussians of dimension 1 to 3.
pub fn kl_oracle(kl: KlFn, pairs: usize, samples: usize, seed: u64) -> Result<KlOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = KlOracleReport {
        pairs,
        outside: 0,
        worst_z: 0.0,
    };
    for _ in 0..pairs {
        let d = rng.random_range(1..=3);
        let draw = |rng: &mut ChaCha8Rng| -> (Tensor, Tensor) {
            let mu = normal(&[1, d], rng);
            let lv = Tensor::new(vec![1, d], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape");
            (mu, lv)
        };
        let (qm, qlv) = draw(&mut rng);
        let (pm, plv) = draw(&mut rng);

        let tape = Tape::new();
        let q = DiagGaussian::new(tape.constant(qm.clone()), tape.constant(qlv.clone()))?;
        let p = DiagGaussian::new(tape.constant(pm.clone()), tape.constant(plv.clone()))?;
        let closed = kl(&q, &p)?.item();

        // Batched Monte Carlo: one row per sample.
        let eps = normal(&[samples, d], &mut rng);
        let tape = Tape::new();
        let rows = |t: &Tensor| tape.constant(t.repeat_rows(samples));
        let q = DiagGaussian::new(rows(&qm), rows(&qlv))?;
        let p = DiagGaussian::new(rows(&pm), rows(&plv))?;
        let z = distributions::reparam_sample(&q, tape.constant(eps))?;
        let diff = gaussian_log_prob(&q, z)?.sub(gaussian_log_prob(&p, z)?)?.value();
        let n = samples as f64;
        let mean = diff.data().iter().sum::<f64>() / n;
        let var = diff.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt().max(1e-300);
        let z_score = (closed - mean).abs() / se;
        report.worst_z = report.worst_z.max(z_score);
        if z_score > 3.0 {
            report.outside += 1;
        }
    }
    Ok(report)
}

/// Gradient check of `total_loss` on a toy model with four labelled and four
/// unlabelled points, alpha 0.7 and weight precision 1e-2.
pub fn total_loss_gradcheck(kind: ModelKind, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = toy_model(kind, &mut rng)?;
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let lb = LabelledBatch {
        x: uniform(4, 6, &mut rng),
        y: Tensor::one_hot(&labels, 3)?,
        eps: normal(&[4, 2], &mut rng),
    };
    let ub = UnlabelledBatch::with_shared_eps(uniform(4, 6, &mut rng), &normal(&[4, 2], &mut rng), 3);
    let params: Vec<Tensor> = model.store.iter().map(|p| p.value().clone()).collect();
    gradcheck::check(&params, gradcheck::FD_STEP, None, |tape, vars| {
        let bound = Bound::from_vars(tape, vars.to_vec());
        Ok(model.total_loss(&bound, Some(&lb), Some(&ub), 0.7, 1e-2)?.loss)
    })
}

/// Textbook Calinski-Harabasz: explicit between and within scatter
/// matrices, then their traces.
pub fn calinski_harabasz_brute_force(points: &[Vec<f64>], ids: &[usize]) -> f64 {
    let (n, d) = (points.len(), points[0].len());
    let mut labels: Vec<usize> = ids.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let k = labels.len();
    let mean_of = |idx: &[usize]| -> Vec<f64> {
        (0..d)
            .map(|j| idx.iter().map(|&i| points[i][j]).sum::<f64>() / idx.len() as f64)
            .collect()
    };
    let all: Vec<usize> = (0..n).collect();
    let c = mean_of(&all);
    let mut b = vec![vec![0.0; d]; d];
    let mut w = vec![vec![0.0; d]; d];
    for &l in &labels {
        let members: Vec<usize> = (0..n).filter(|&i| ids[i] == l).collect();
        let m = mean_of(&members);
        for r in 0..d {
            for s in 0..d {
                b[r][s] += members.len() as f64 * (m[r] - c[r]) * (m[s] - c[s]);
                for &i in &members {
                    w[r][s] += (points[i][r] - m[r]) * (points[i][s] - m[s]);
                }
            }
        }
    }
    let tr = |a: &Vec<Vec<f64>>| (0..d).map(|i| a[i][i]).sum::<f64>();
    (tr(&b) / (k - 1) as f64) / (tr(&w) / (n - k) as f64)
}

/// Largest relative difference between [`calinski_harabasz`] and the brute
/// force over `instances` random problems with `N <= 30`, `k <= 4`.
pub fn ch_oracle(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let k = rng.random_range(2..=4);
        let n = rng.random_range(k + 1..=30);
        let d = rng.random_range(1..=4);
        let mut ids: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        ids.rotate_left(rng.random_range(0..n));
        let points: Vec<Vec<f64>> = ids
            .iter()
            .map(|&c| {
                (0..d)
                    .map(|_| c as f64 * rng.random_range(0.0..3.0) + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let fast = calinski_harabasz(&Tensor::from_rows(&points)?, &ids)?;
        let slow = calinski_harabasz_brute_force(&points, &ids);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
        done += 1;
    }
    Ok(worst)
}

/// Largest deviation from 1 of a row sum of `exp(log_softmax(x))`.
pub fn log_softmax_normalisation(rows: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(&[rows, 7], &mut rng).map_scaled(30.0);
    let tape = Tape::new();
    let out = Categorical::from_logits(tape.constant(x))?
        .log_probs
        .exp()
        .sum_rows()
        .value();
    Ok(out.data().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max))
}

trait Scaled {
    fn map_scaled(self, c: f64) -> Tensor;
}

impl Scaled for Tensor {
    fn map_scaled(mut self, c: f64) -> Tensor {
        self.data_mut().iter_mut().for_each(|v| *v *= c);
        self
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = (&'static str, Box<dyn Fn() -> Result<(bool, String)>>);

/// Runs every check and reports each one; never stops at the first failure.
pub fn run_selftest(hooks: Hooks, seed: u64) -> Vec<CheckOutcome> {
    let checks: Vec<Check> = vec![
        (
            "marginalisation_identity",
            Box::new(move || {
                let gap = marginalisation_gap(100, seed)?;
                Ok((gap <= 1e-12, format!("max gap {gap:.3e} (limit 1e-12)")))
            }),
        ),
        (
            "gaussian_kl_vs_monte_carlo",
            Box::new(move || {
                let r = kl_oracle(hooks.gaussian_kl, 100, 100_000, seed)?;
                Ok((
                    r.outside == 0,
                    format!(
                        "{} of {} pairs beyond 3 SE, worst {:.2} SE",
                        r.outside, r.pairs, r.worst_z
                    ),
                ))
            }),
        ),
        (
            "total_loss_gradients_m2",
            Box::new(move || {
                let r = total_loss_gradcheck(ModelKind::M2, seed)?;
                Ok((
                    r.passes(1e-4),
                    format!("{} entries, max rel error {:.3e}", r.checked, r.max_rel_error),
                ))
            }),
        ),
        (
            "total_loss_gradients_gmdgm",
            Box::new(move || {
                let r = total_loss_gradcheck(ModelKind::GmDgm, seed)?;
                Ok((
                    r.passes(1e-4),
                    format!("{} entries, max rel error {:.3e}", r.checked, r.max_rel_error),
                ))
            }),
        ),
        (
            "calinski_harabasz_oracle",
            Box::new(move || {
                let worst = ch_oracle(50, seed)?;
                Ok((worst <= 1e-9, format!("max rel difference {worst:.3e} (limit 1e-9)")))
            }),
        ),
        (
            "log_softmax_normalisation",
            Box::new(move || {
                let worst = log_softmax_normalisation(200, seed)?;
                Ok((worst <= 1e-12, format!("max |row sum - 1| {worst:.3e}")))
            }),
        ),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped_kl<'t>(q: &DiagGaussian<'t>, p: &DiagGaussian<'t>) -> Result<Var<'t>> {
        Ok(distributions::gaussian_kl(q, p)?.neg())
    }

    #[test]
    fn fresh_build_passes_everything() {
        let results = run_selftest(Hooks::default(), 0);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), 6);
    }

    #[test]
    fn corrupted_kl_sign_is_caught_and_named() {
        let r = kl_oracle(flipped_kl, 10, 10_000, 1).unwrap();
        assert!(r.outside > 0);
        let hooks = Hooks {
            gaussian_kl: flipped_kl,
        };
        let results = run_selftest(hooks, 0);
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(failed, vec!["gaussian_kl_vs_monte_carlo"]);
    }

    #[test]
    fn brute_force_ch_agrees_on_a_hand_instance() {
        let pts = vec![vec![0.0], vec![2.0], vec![10.0], vec![12.0]];
        // B = 4 * 25 = 100 over 1 dof, W = 4 over 2 dof
        assert!((calinski_harabasz_brute_force(&pts, &[0, 0, 1, 1]) - 50.0).abs() < 1e-12);
    }
}
