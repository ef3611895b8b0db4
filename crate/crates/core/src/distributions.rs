//! Differentiable distribution primitives.
//!
//! Every function returns one value per batch row.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-variances are clamped into this range before use.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Bernoulli means are kept inside `[EPS, 1 - EPS]`.
pub const BERNOULLI_EPS: f64 = 1e-7;

/// Diagonal Gaussian with per-row mean and log-variance.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t> {
    pub mu: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    /// Clamps `raw_log_var` into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mu: Var<'t>, raw_log_var: Var<'t>) -> Result<Self> {
        if mu.shape() != raw_log_var.shape() {
            return Err(Error::dim("DiagGaussian", &mu.shape(), &raw_log_var.shape()));
        }
        Ok(Self {
            mu,
            log_var: raw_log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX),
        })
    }

    /// `N(0, I)` with the given shape, as constants.
    pub fn standard(tape: &'t Tape, shape: &[usize]) -> Self {
        Self {
            mu: tape.constant(Tensor::zeros(shape)),
            log_var: tape.constant(Tensor::zeros(shape)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[1]
    }
}

/// Bernoulli vector parameterised through clamped logits.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliVec<'t> {
    /// Unclamped; the clamp is applied wherever the logits are read.
    raw_logits: Var<'t>,
}

fn max_logit() -> f64 {
    ((1.0 - BERNOULLI_EPS) / BERNOULLI_EPS).ln()
}

impl<'t> BernoulliVec<'t> {
    /// Clamping the logit to `±ln((1-ε)/ε)` is the same as clamping the mean
    /// to `[ε, 1-ε]`.
    pub fn from_logits(logits: Var<'t>) -> Self {
        Self { raw_logits: logits }
    }

    pub fn from_means(tape: &'t Tape, means: &Tensor) -> Self {
        let logits = means.map(|p| {
            let p = p.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
            (p / (1.0 - p)).ln()
        });
        Self::from_logits(tape.constant(logits))
    }

    pub fn logits(&self) -> Var<'t> {
        let m = max_logit();
        self.raw_logits.clamp(-m, m)
    }

    pub fn mean(&self) -> Var<'t> {
        self.logits().sigmoid()
    }
}

/// Row-wise categorical distribution over `K` classes.
#[derive(Clone, Copy, Debug)]
pub struct Categorical<'t> {
    pub log_probs: Var<'t>,
}

impl<'t> Categorical<'t> {
    /// From unnormalised scores.
    pub fn from_logits(logits: Var<'t>) -> Result<Self> {
        Ok(Self {
            log_probs: logits.log_softmax()?,
        })
    }

    /// From probabilities whose rows sum to one (within `1e-9`). Zero
    /// probabilities are allowed and become `-inf` log-probabilities.
    pub fn from_probs(tape: &'t Tape, probs: &Tensor) -> Result<Self> {
        check_rows_normalised(probs)?;
        Ok(Self {
            log_probs: tape.constant(probs.map(f64::ln)),
        })
    }

    pub fn classes(&self) -> usize {
        self.log_probs.shape()[1]
    }

    pub fn probs(&self) -> Tensor {
        self.log_probs.value().map(f64::exp)
    }
}

fn check_rows_normalised(probs: &Tensor) -> Result<()> {
    if probs.rank() != 2 {
        return Err(Error::dim("Categorical", probs.shape(), &[]));
    }
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Contract(format!("row {i} is not a distribution (sums to {s})")));
        }
    }
    Ok(())
}

/// `mu + exp(log_var / 2) * eps`.
pub fn reparam_sample<'t>(g: &DiagGaussian<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    if eps.shape() != g.mu.shape() {
        return Err(Error::dim("reparam_sample", &g.mu.shape(), &eps.shape()));
    }
    g.mu.add(g.log_var.scale(0.5).exp().mul(eps)?)
}

/// `log N(z; mu, diag(exp(log_var)))` per row.
pub fn gaussian_log_prob<'t>(g: &DiagGaussian<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let d = g.dim() as f64;
    let sq = z.sub(g.mu)?.square().mul(g.log_var.neg().exp())?;
    Ok(sq
        .add(g.log_var)?
        .sum_rows()
        .scale(-0.5)
        .add_scalar(-0.5 * d * (2.0 * PI).ln()))
}

/// Closed-form `KL(q || p)` between diagonal Gaussians, per row.
pub fn gaussian_kl<'t>(q: &DiagGaussian<'t>, p: &DiagGaussian<'t>) -> Result<Var<'t>> {
    if q.mu.shape() != p.mu.shape() {
        return Err(Error::dim("gaussian_kl", &q.mu.shape(), &p.mu.shape()));
    }
    let inv_var_p = p.log_var.neg().exp();
    let ratio = q.log_var.exp().add(q.mu.sub(p.mu)?.square())?.mul(inv_var_p)?;
    let terms = p.log_var.sub(q.log_var)?.add(ratio)?;
    Ok(terms.sum_rows().add_scalar(-(q.dim() as f64)).scale(0.5))
}

/// `sum_j x_j ln m_j + (1 - x_j) ln(1 - m_j)` per row; `x` may be real-valued
/// in `[0, 1]`.
pub fn bernoulli_log_prob<'t>(b: &BernoulliVec<'t>, x: Var<'t>) -> Result<Var<'t>> {
    if x.shape() != b.raw_logits.shape() {
        return Err(Error::dim("bernoulli_log_prob", &b.raw_logits.shape(), &x.shape()));
    }
    if let Some(bad) = x.value().data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            op: "bernoulli_log_prob",
            detail: format!("target {bad} outside [0, 1]"),
        });
    }
    // x ln σ(l) + (1-x) ln(1-σ(l)) = x l - softplus(l)
    b.raw_logits.bernoulli_log_lik(x, max_logit())
}

/// `-sum_k p_k ln p_k` per row.
pub fn categorical_entropy<'t>(c: &Categorical<'t>) -> Result<Var<'t>> {
    Ok(c.log_probs.row_neg_entropy()?.neg())
}

/// Class index of each one-hot row.
pub fn one_hot_indices(y: &Tensor) -> Result<Vec<usize>> {
    if y.rank() != 2 {
        return Err(Error::Contract(format!(
            "one-hot labels must be a matrix, got {:?}",
            y.shape()
        )));
    }
    (0..y.rows())
        .map(|i| {
            let row = y.row(i);
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(j, _)| j)
                .collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() == 1 && zeros + 1 == row.len() {
                Ok(ones[0])
            } else {
                Err(Error::Contract(format!("row {i} is not one-hot: {row:?}")))
            }
        })
        .collect()
}

/// `-sum_k y_k ln p_k` per row for one-hot `y`.
pub fn categorical_cross_entropy<'t>(c: &Categorical<'t>, y: &Tensor) -> Result<Var<'t>> {
    if y.shape() != c.log_probs.shape().as_slice() {
        return Err(Error::dim("categorical_cross_entropy", &c.log_probs.shape(), y.shape()));
    }
    let idx = one_hot_indices(y)?;
    Ok(c.log_probs.pick_cols(&idx)?.neg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn col<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
        tape.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    fn gauss<'t>(tape: &'t Tape, mu: &[f64], lv: &[f64]) -> DiagGaussian<'t> {
        DiagGaussian::new(col(tape, mu), col(tape, lv)).unwrap()
    }

    #[test]
    fn reparam_examples() {
        let tape = Tape::new();
        let g = gauss(&tape, &[0.3, -2.0], &[0.7, -1.0]);
        let z = reparam_sample(&g, col(&tape, &[0.0, 0.0])).unwrap();
        assert_eq!(z.value().data(), &[0.3, -2.0]);
        let g = gauss(&tape, &[0.0], &[0.0]);
        assert_eq!(reparam_sample(&g, col(&tape, &[1.5])).unwrap().item(), 1.5);
        assert!(reparam_sample(&g, col(&tape, &[1.0, 2.0])).is_err());
    }

    #[test]
    fn reparam_moments_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let (mu, lv) = (0.8, -0.6);
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let tape = Tape::new();
        let g = DiagGaussian::new(
            tape.constant(Tensor::full(&[n, 1], mu)),
            tape.constant(Tensor::full(&[n, 1], lv)),
        )
        .unwrap();
        let z = reparam_sample(&g, tape.constant(Tensor::new(vec![n, 1], eps).unwrap()))
            .unwrap()
            .value();
        let mean = z.sum() / n as f64;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sigma2 = f64::exp(lv);
        assert!((mean - mu).abs() < 3.0 * (sigma2 / n as f64).sqrt());
        // Var of the sample variance for a Gaussian is 2σ⁴/(n-1).
        assert!((var - sigma2).abs() < 3.0 * (2.0 * sigma2 * sigma2 / (n as f64 - 1.0)).sqrt());
    }

    #[test]
    fn gaussian_log_prob_examples() {
        let tape = Tape::new();
        let g = gauss(&tape, &[0.0], &[0.0]);
        assert_abs_diff_eq!(
            gaussian_log_prob(&g, col(&tape, &[0.0])).unwrap().item(),
            -0.9189385332046727,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            gaussian_log_prob(&g, col(&tape, &[1.0])).unwrap().item(),
            -1.4189385332046727,
            epsilon = 1e-12
        );

        let g2 = gauss(&tape, &[0.5, -1.0], &[0.3, -0.4]);
        let joint = gaussian_log_prob(&g2, col(&tape, &[0.1, 0.2])).unwrap().item();
        let a = gaussian_log_prob(&gauss(&tape, &[0.5], &[0.3]), col(&tape, &[0.1]))
            .unwrap()
            .item();
        let b = gaussian_log_prob(&gauss(&tape, &[-1.0], &[-0.4]), col(&tape, &[0.2]))
            .unwrap()
            .item();
        assert_abs_diff_eq!(joint, a + b, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_kl_examples() {
        let tape = Tape::new();
        let q = gauss(&tape, &[0.4, -0.2], &[0.1, 1.3]);
        assert_eq!(gaussian_kl(&q, &q).unwrap().item(), 0.0);
        let q = gauss(&tape, &[1.0], &[0.0]);
        let p = gauss(&tape, &[0.0], &[0.0]);
        assert_abs_diff_eq!(gaussian_kl(&q, &p).unwrap().item(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn log_var_is_clamped() {
        let tape = Tape::new();
        let g = gauss(&tape, &[0.0, 0.0], &[-50.0, 50.0]);
        assert_eq!(g.log_var.value().data(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
    }

    #[test]
    fn bernoulli_examples() {
        let tape = Tape::new();
        let b = BernoulliVec::from_means(&tape, &Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        assert_abs_diff_eq!(
            bernoulli_log_prob(&b, col(&tape, &[1.0])).unwrap().item(),
            0.5f64.ln(),
            epsilon = 1e-12
        );
        let b = BernoulliVec::from_means(&tape, &Tensor::new(vec![1, 2], vec![0.9, 0.9]).unwrap());
        assert_abs_diff_eq!(
            bernoulli_log_prob(&b, col(&tape, &[1.0, 0.0])).unwrap().item(),
            -2.4079456086518722,
            epsilon = 1e-12
        );
        assert!(matches!(
            bernoulli_log_prob(&b, col(&tape, &[1.5, 0.0])),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn bernoulli_log_prob_is_maximised_at_the_mean() {
        // For a real target x the maximising mean is x itself; equivalently, for a
        // fixed mean m the expected log-likelihood under x ~ B(m) is maximised
        // by predicting m. Grid search over predicted means for fixed x.
        let tape = Tape::new();
        for &x in &[0.1, 0.35, 0.5, 0.8] {
            let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
            let scores: Vec<f64> = grid
                .iter()
                .map(|&m| {
                    let b = BernoulliVec::from_means(&tape, &Tensor::new(vec![1, 1], vec![m]).unwrap());
                    bernoulli_log_prob(&b, col(&tape, &[x])).unwrap().item()
                })
                .collect();
            let best = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| grid[i])
                .unwrap();
            assert!((best - x).abs() < 0.011, "x={x} best={best}");
        }
    }

    #[test]
    fn means_stay_inside_clamp() {
        let tape = Tape::new();
        let b = BernoulliVec::from_logits(col(&tape, &[-100.0, 100.0]));
        let m = b.mean().value();
        assert!((m.data()[0] - BERNOULLI_EPS).abs() < 1e-12);
        assert!((m.data()[1] - (1.0 - BERNOULLI_EPS)).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let tape = Tape::new();
        let u15 = Categorical::from_probs(&tape, &Tensor::full(&[1, 15], 1.0 / 15.0)).unwrap();
        assert_abs_diff_eq!(categorical_entropy(&u15).unwrap().item(), 15f64.ln(), epsilon = 1e-12);
        let u10 = Categorical::from_probs(&tape, &Tensor::full(&[1, 10], 0.1)).unwrap();
        assert_abs_diff_eq!(categorical_entropy(&u10).unwrap().item(), 10f64.ln(), epsilon = 1e-12);
        let one = Categorical::from_probs(&tape, &Tensor::one_hot(&[3], 5).unwrap()).unwrap();
        assert_eq!(categorical_entropy(&one).unwrap().item(), 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let u = Categorical::from_probs(&tape, &Tensor::full(&[1, 10], 0.1)).unwrap();
        let y = Tensor::one_hot(&[7], 10).unwrap();
        assert_abs_diff_eq!(
            categorical_cross_entropy(&u, &y).unwrap().item(),
            10f64.ln(),
            epsilon = 1e-12
        );
        let one = Categorical::from_probs(&tape, &Tensor::one_hot(&[2], 4).unwrap()).unwrap();
        assert_eq!(
            categorical_cross_entropy(&one, &Tensor::one_hot(&[2], 4).unwrap())
                .unwrap()
                .item(),
            0.0
        );
        let c = Categorical::from_probs(&tape, &Tensor::new(vec![1, 2], vec![0.7, 0.3]).unwrap()).unwrap();
        assert_abs_diff_eq!(
            categorical_cross_entropy(&c, &Tensor::one_hot(&[1], 2).unwrap())
                .unwrap()
                .item(),
            1.2039728043259361,
            epsilon = 1e-12
        );
        let not_one_hot = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            categorical_cross_entropy(&c, &not_one_hot),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn densities_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut r = |shape: &[usize], scale: f64| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let params = vec![
            r(&[3, 4], 1.0),
            r(&[3, 4], 1.0),
            r(&[3, 4], 1.0),
            r(&[3, 4], 1.0),
            r(&[3, 4], 2.0),
        ];
        let x = r(&[3, 4], 1.0).map(|v| 0.5 + 0.5 * v);
        let y = Tensor::one_hot(&[0, 3, 1], 4).unwrap();
        let report = gradcheck::check(&params, gradcheck::FD_STEP, None, |tape, v| {
            let q = DiagGaussian::new(v[0], v[1])?;
            let p = DiagGaussian::new(v[2], v[3])?;
            let eps = tape.constant(Tensor::full(&[3, 4], 0.3));
            let z = reparam_sample(&q, eps)?;
            let lp = gaussian_log_prob(&p, z)?;
            let kl = gaussian_kl(&q, &p)?;
            let b = BernoulliVec::from_logits(v[4]);
            let bl = bernoulli_log_prob(&b, tape.constant(x.clone()))?;
            let c = Categorical::from_logits(v[4])?;
            let h = categorical_entropy(&c)?;
            let ce = categorical_cross_entropy(&c, &y)?;
            Ok(lp.add(kl)?.add(bl)?.add(h)?.add(ce)?.sum())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
