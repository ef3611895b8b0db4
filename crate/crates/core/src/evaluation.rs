//! Cluster attribution, accuracy, Calinski-Harabasz and collapse diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::models::{argmax_rows, ModelParams, PriorY};
use crate::tensor::Tensor;

/// Map from predicted (model) class to true class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attribution {
    /// `None` for predicted classes with no members.
    pub map: Vec<Option<usize>>,
    /// True class used for predicted classes that were empty when the map was
    /// built but receive points later (the globally modal true class).
    pub fallback: usize,
}

impl Attribution {
    pub fn resolve(&self, predicted: usize) -> usize {
        self.map.get(predicted).copied().flatten().unwrap_or(self.fallback)
    }

    pub fn used(&self) -> usize {
        self.map.iter().flatten().count()
    }
}

fn modal(counts: &[u64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && best.is_none_or(|b| n > counts[b]) {
            best = Some(c);
        }
    }
    best
}

/// Maps each predicted class to the most common true class among its
/// members. Ties go to the lower true-class index.
pub fn attribute_clusters(pred: &[usize], truth: &[usize], k_total: usize, k_true: usize) -> Result<Attribution> {
    if pred.len() != truth.len() {
        return Err(Error::dim("attribute_clusters", &[pred.len()], &[truth.len()]));
    }
    let mut counts = vec![vec![0u64; k_true]; k_total];
    let mut overall = vec![0u64; k_true];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k_total || t >= k_true {
            return Err(Error::Contract(format!(
                "class pair ({p}, {t}) outside {k_total} predicted x {k_true} true classes"
            )));
        }
        counts[p][t] += 1;
        overall[t] += 1;
    }
    Ok(Attribution {
        map: counts.iter().map(|c| modal(c)).collect(),
        fallback: modal(&overall).unwrap_or(0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    /// `matrix[true][attributed]`.
    pub matrix: Vec<Vec<u64>>,
    pub accuracy: f64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }
}

pub fn confusion_and_accuracy(
    pred: &[usize],
    truth: &[usize],
    attribution: &Attribution,
    k_true: usize,
) -> Result<Confusion> {
    if pred.len() != truth.len() {
        return Err(Error::dim("confusion_and_accuracy", &[pred.len()], &[truth.len()]));
    }
    let mut matrix = vec![vec![0u64; k_true]; k_true];
    let mut correct = 0u64;
    for (&p, &t) in pred.iter().zip(truth) {
        let a = attribution.resolve(p);
        if t >= k_true || a >= k_true {
            return Err(Error::Contract(format!(
                "true class {t} or attributed class {a} >= {k_true}"
            )));
        }
        matrix[t][a] += 1;
        correct += u64::from(a == t);
    }
    let accuracy = if pred.is_empty() {
        0.0
    } else {
        correct as f64 / pred.len() as f64
    };
    Ok(Confusion { matrix, accuracy })
}

/// Calinski-Harabasz index: `[tr(B)/(k-1)] / [tr(W)/(N-k)]` over the
/// non-empty clusters.
pub fn calinski_harabasz(points: &Tensor, cluster_ids: &[usize]) -> Result<f64> {
    let (n, d) = (points.rows(), points.cols());
    if cluster_ids.len() != n {
        return Err(Error::dim("calinski_harabasz", points.shape(), &[cluster_ids.len()]));
    }
    let n_ids = cluster_ids.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; n_ids];
    let mut sizes = vec![0usize; n_ids];
    let mut centre = vec![0.0; d];
    for (i, &c) in cluster_ids.iter().enumerate() {
        sizes[c] += 1;
        for (j, v) in points.row(i).iter().enumerate() {
            sums[c][j] += v;
            centre[j] += v;
        }
    }
    let k = sizes.iter().filter(|&&s| s > 0).count();
    if k < 2 {
        return Err(Error::UndefinedScore(format!(
            "{k} non-empty cluster(s); need at least 2"
        )));
    }
    if n <= k {
        return Err(Error::UndefinedScore(format!("{n} points for {k} clusters")));
    }
    centre.iter_mut().for_each(|v| *v /= n as f64);
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&sizes)
        .map(|(s, &m)| s.iter().map(|v| v / m.max(1) as f64).collect())
        .collect();
    let between: f64 = means
        .iter()
        .zip(&sizes)
        .filter(|(_, &m)| m > 0)
        .map(|(mu, &m)| m as f64 * mu.iter().zip(&centre).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    let within: f64 = cluster_ids
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            points
                .row(i)
                .iter()
                .zip(&means[c])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    if !(within > 0.0) {
        return Err(Error::UndefinedScore("within-cluster dispersion is zero".into()));
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Thresholds for flagging collapse of `q(y|x)`.
pub const PRIOR_COLLAPSE_KL: f64 = 0.01;
pub const PRIOR_COLLAPSE_ENTROPY_FRACTION: f64 = 0.9;
pub const ONE_CLASS_FRACTION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub mean_entropy: f64,
    /// `KL(mean_x q(y|x) || p(y))`.
    pub kl_to_prior: f64,
    pub modal_fraction: f64,
    /// Number of points whose argmax is each class.
    pub usage: Vec<u64>,
    pub prior_collapse: bool,
    pub one_class_collapse: bool,
}

impl CollapseReport {
    pub fn collapsed(&self) -> bool {
        self.prior_collapse || self.one_class_collapse
    }
}

/// Diagnoses collapse from `log q(y|x)` rows.
pub fn collapse_diagnostic(log_probs: &Tensor, prior: &PriorY) -> Result<CollapseReport> {
    let (n, k) = (log_probs.rows(), log_probs.cols());
    if n == 0 {
        return Err(Error::Contract("collapse diagnostic needs at least one row".into()));
    }
    if k != prior.len() {
        return Err(Error::dim("collapse_diagnostic", log_probs.shape(), &[prior.len()]));
    }
    let mut aggregate = vec![0.0; k];
    let mut entropy = 0.0;
    for i in 0..n {
        for (a, &lp) in aggregate.iter_mut().zip(log_probs.row(i)) {
            let p = lp.exp();
            *a += p;
            if p > 0.0 {
                entropy -= p * lp;
            }
        }
    }
    aggregate.iter_mut().for_each(|a| *a /= n as f64);
    let kl_to_prior: f64 = aggregate
        .iter()
        .zip(prior.log_pi())
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, lp)| a * (a.ln() - lp))
        .sum::<f64>()
        .max(0.0);
    let mut usage = vec![0u64; k];
    for c in argmax_rows(log_probs) {
        usage[c] += 1;
    }
    let modal_fraction = *usage.iter().max().unwrap_or(&0) as f64 / n as f64;
    let mean_entropy = entropy / n as f64;
    Ok(CollapseReport {
        mean_entropy,
        kl_to_prior,
        modal_fraction,
        usage,
        prior_collapse: kl_to_prior < PRIOR_COLLAPSE_KL
            && mean_entropy > PRIOR_COLLAPSE_ENTROPY_FRACTION * (k as f64).ln(),
        one_class_collapse: modal_fraction > ONE_CLASS_FRACTION,
    })
}

const EVAL_CHUNK: usize = 500;

/// Recognition means `mu_phi(x, y_hat)` with `y_hat = argmax q(y|x)`.
pub fn export_latents(model: &ModelParams, x: &Tensor) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let log_probs = model.predict_log_probs(x, EVAL_CHUNK)?;
    let pred = argmax_rows(&log_probs);
    let latents = model.latent_means(x, &pred, EVAL_CHUNK)?;
    Ok((latents, pred, log_probs))
}

/// Where the cluster-to-class map is fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributionSource {
    /// Fit on the evaluated set itself (the published protocol).
    Test,
    /// Fit on a separate labelled validation set.
    Validation,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub attribution: Attribution,
    pub attribution_source: AttributionSource,
    pub confusion: Confusion,
    pub accuracy: f64,
    /// `Err` text when the score is undefined.
    pub ch_score: std::result::Result<f64, String>,
    pub collapse: CollapseReport,
    pub true_class_names: Vec<String>,
    pub latents: Tensor,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
}

/// Evaluates `model` on `(x, truth)`. `true_class_names` indexes the true
/// classes. With `validation = Some(..)` the attribution is fitted there.
pub fn evaluate(
    model: &ModelParams,
    x: &Tensor,
    truth: &[usize],
    true_class_names: &[String],
    validation: Option<(&Tensor, &[usize])>,
) -> Result<EvalReport> {
    let k_true = true_class_names.len();
    let k_total = model.classes();
    let (latents, predicted, log_probs) = export_latents(model, x)?;
    let (attribution, source) = match validation {
        Some((vx, vtruth)) => {
            let vpred = argmax_rows(&model.predict_log_probs(vx, EVAL_CHUNK)?);
            (
                attribute_clusters(&vpred, vtruth, k_total, k_true)?,
                AttributionSource::Validation,
            )
        }
        None => (
            attribute_clusters(&predicted, truth, k_total, k_true)?,
            AttributionSource::Test,
        ),
    };
    let confusion = confusion_and_accuracy(&predicted, truth, &attribution, k_true)?;
    let ch_score = match calinski_harabasz(&latents, &predicted) {
        Ok(v) => Ok(v),
        Err(Error::UndefinedScore(why)) => Err(why),
        Err(e) => return Err(e),
    };
    let collapse = collapse_diagnostic(&log_probs, &model.prior)?;
    Ok(EvalReport {
        accuracy: confusion.accuracy,
        attribution,
        attribution_source: source,
        confusion,
        ch_score,
        collapse,
        true_class_names: true_class_names.to_vec(),
        latents,
        predicted,
        truth: truth.to_vec(),
    })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl EvalReport {
    pub fn metrics_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.truth.len());
        let _ = writeln!(s, "accuracy = {}", self.accuracy);
        match &self.ch_score {
            Ok(v) => {
                let _ = writeln!(s, "ch_score = {v}");
            }
            Err(why) => {
                let _ = writeln!(s, "ch_score = undefined ({why})");
            }
        }
        let src = match self.attribution_source {
            AttributionSource::Test => "test",
            AttributionSource::Validation => "validation",
        };
        let _ = writeln!(s, "attribution_source = {src}");
        let attr: Vec<String> = self
            .attribution
            .map
            .iter()
            .map(|a| a.map_or("unused".to_string(), |c| self.true_class_names[c].clone()))
            .collect();
        let _ = writeln!(s, "attribution = {}", attr.join(","));
        let _ = writeln!(
            s,
            "attribution_fallback = {}",
            self.true_class_names[self.attribution.fallback]
        );
        let c = &self.collapse;
        let _ = writeln!(s, "mean_entropy_q_y = {}", c.mean_entropy);
        let _ = writeln!(s, "kl_aggregate_q_y_to_prior = {}", c.kl_to_prior);
        let _ = writeln!(s, "modal_class_fraction = {}", c.modal_fraction);
        let _ = writeln!(s, "class_usage = {}", join(&c.usage));
        let _ = writeln!(s, "prior_collapse = {}", c.prior_collapse);
        let _ = writeln!(s, "one_class_collapse = {}", c.one_class_collapse);
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = format!("true\\attributed,{}\n", self.true_class_names.join(","));
        for (name, row) in self.true_class_names.iter().zip(&self.confusion.matrix) {
            let _ = writeln!(s, "{name},{}", join(row));
        }
        s
    }

    pub fn latents_csv(&self) -> String {
        let d = self.latents.cols();
        let mut s: String = (0..d).map(|j| format!("z{j},")).collect();
        s.push_str("predicted,true\n");
        for i in 0..self.latents.rows() {
            for v in self.latents.row(i) {
                let _ = write!(s, "{v},");
            }
            let _ = writeln!(s, "{},{}", self.predicted[i], self.truth[i]);
        }
        s
    }

    /// Writes `metrics.txt`, `confusion.csv` and `latents.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(dir.join("latents.csv"), self.latents_csv().as_bytes())?;
        write_atomic(dir.join("confusion.csv"), self.confusion_csv().as_bytes())?;
        write_atomic(dir.join("metrics.txt"), self.metrics_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attribution_majority_and_ties() {
        let mut pred = vec![0; 50];
        let mut truth = vec![3; 40];
        truth.extend([5; 10]);
        pred.extend([1; 50]);
        truth.extend([5; 25]);
        truth.extend([3; 25]);
        let a = attribute_clusters(&pred, &truth, 3, 10).unwrap();
        assert_eq!(a.map, vec![Some(3), Some(3), None]);
        assert_eq!(a.fallback, 3);
    }

    #[test]
    fn many_to_one_attribution() {
        let pred: Vec<usize> = (0..150).map(|i| i % 15).collect();
        let truth: Vec<usize> = (0..150).map(|i| (i % 15) % 10).collect();
        let a = attribute_clusters(&pred, &truth, 15, 10).unwrap();
        assert_eq!(a.used(), 15);
        let c = confusion_and_accuracy(&pred, &truth, &a, 10).unwrap();
        assert_eq!(c.accuracy, 1.0);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let a = attribute_clusters(&truth, &truth, 4, 4).unwrap();
        let c = confusion_and_accuracy(&truth, &truth, &a, 4).unwrap();
        assert_eq!(c.accuracy, 1.0);
        for (i, row) in c.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 10 } else { 0 });
            }
        }

        let mut skewed = truth.clone();
        skewed.extend([2; 20]);
        let pred = vec![0; skewed.len()];
        let a = attribute_clusters(&pred, &skewed, 4, 4).unwrap();
        let c = confusion_and_accuracy(&pred, &skewed, &a, 4).unwrap();
        assert!((c.accuracy - 30.0 / 60.0).abs() < 1e-15);
        assert_eq!(c.total(), 60);
        let row_sums: Vec<u64> = c.matrix.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![10, 10, 30, 10]);
    }

    #[test]
    fn accuracy_never_below_constant_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..80);
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
            let a = attribute_clusters(&pred, &truth, 7, 5).unwrap();
            let acc = confusion_and_accuracy(&pred, &truth, &a, 5).unwrap().accuracy;
            let modal = (0..5).map(|c| truth.iter().filter(|&&t| t == c).count()).max().unwrap();
            assert!(acc + 1e-12 >= modal as f64 / n as f64);
        }
    }

    #[test]
    fn validation_fitted_attribution_falls_back_for_unseen_clusters() {
        let a = attribute_clusters(&[0, 0, 1], &[2, 2, 1], 3, 3).unwrap();
        assert_eq!(a.resolve(2), 2);
        let c = confusion_and_accuracy(&[2, 1], &[2, 1], &a, 3).unwrap();
        assert_eq!(c.accuracy, 1.0);
    }

    fn brute_ch(points: &[Vec<f64>], ids: &[usize]) -> f64 {
        let n = points.len();
        let d = points[0].len();
        let clusters: Vec<usize> = {
            let mut c: Vec<usize> = ids.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        };
        let k = clusters.len();
        let mean = |members: &[&Vec<f64>]| -> Vec<f64> {
            (0..d)
                .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                .collect()
        };
        let all: Vec<&Vec<f64>> = points.iter().collect();
        let c = mean(&all);
        let (mut b, mut w) = (0.0, 0.0);
        for &cl in &clusters {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(ids)
                .filter(|(_, &i)| i == cl)
                .map(|(p, _)| p)
                .collect();
            let m = mean(&members);
            b += members.len() as f64 * (0..d).map(|j| (m[j] - c[j]).powi(2)).sum::<f64>();
            w += members
                .iter()
                .map(|p| (0..d).map(|j| (p[j] - m[j]).powi(2)).sum::<f64>())
                .sum::<f64>();
        }
        (b / (k - 1) as f64) / (w / (n - k) as f64)
    }

    #[test]
    fn ch_matches_brute_force_six_points() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.5],
            vec![0.5, 1.0],
            vec![5.0, 5.0],
            vec![6.0, 5.5],
            vec![5.5, 6.5],
        ];
        let ids = [0, 0, 0, 1, 1, 1];
        let t = Tensor::from_rows(&pts).unwrap();
        let ch = calinski_harabasz(&t, &ids).unwrap();
        assert!((ch - brute_ch(&pts, &ids)).abs() <= 1e-9 * ch.abs().max(1.0));
    }

    #[test]
    fn ch_invariances_and_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let off = if i < 20 { 0.0 } else { 20.0 };
                vec![off + rng.random::<f64>(), off + rng.random::<f64>()]
            })
            .collect();
        let ids: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let t = Tensor::from_rows(&pts).unwrap();
        let ch = calinski_harabasz(&t, &ids).unwrap();
        let random_ids: Vec<usize> = (0..40).map(|_| rng.random_range(0..2)).collect();
        assert!(ch > 10.0 * calinski_harabasz(&t, &random_ids).unwrap());

        let relabelled: Vec<usize> = ids.iter().map(|&i| [7, 3][i]).collect();
        assert!((calinski_harabasz(&t, &relabelled).unwrap() - ch).abs() < 1e-9 * ch);
        let moved = Tensor::from_rows(
            &pts.iter()
                .map(|p| vec![p[0] * 3.0 - 4.0, p[1] * 3.0 + 11.0])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((calinski_harabasz(&moved, &ids).unwrap() - ch).abs() < 1e-9 * ch);
    }

    #[test]
    fn ch_undefined_cases() {
        let t = Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert!(matches!(
            calinski_harabasz(&t, &[0, 0, 0]),
            Err(Error::UndefinedScore(_))
        ));
        let t2 = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(matches!(calinski_harabasz(&t2, &[0, 1]), Err(Error::UndefinedScore(_))));
        let t3 = Tensor::from_rows(&[[0.0], [0.0], [1.0], [1.0]]).unwrap();
        assert!(matches!(
            calinski_harabasz(&t3, &[0, 0, 1, 1]),
            Err(Error::UndefinedScore(_))
        ));
    }

    #[test]
    fn collapse_flags() {
        let prior = PriorY::from_probs(&[0.25; 4]).unwrap();
        let at_prior = Tensor::full(&[10, 4], 0.25f64.ln());
        let r = collapse_diagnostic(&at_prior, &prior).unwrap();
        assert!(r.kl_to_prior.abs() < 1e-12);
        assert!(r.prior_collapse);

        let mut one = Tensor::full(&[10, 4], f64::NEG_INFINITY);
        for i in 0..10 {
            one.data_mut()[i * 4] = 0.0;
        }
        let r = collapse_diagnostic(&one, &prior).unwrap();
        assert!(r.one_class_collapse && !r.prior_collapse);
        assert_eq!(r.usage, vec![10, 0, 0, 0]);
        assert_eq!(r.mean_entropy, 0.0);

        let mut spread = Tensor::full(&[8, 4], (1e-6f64).ln());
        for i in 0..8 {
            spread.data_mut()[i * 4 + i % 4] = (1.0 - 3e-6f64).ln();
        }
        let r = collapse_diagnostic(&spread, &prior).unwrap();
        assert!(!r.collapsed());
    }
}
