//! Central finite-difference gradient checking.
//!
//! The finite-difference side only ever evaluates the forward pass on a
//! fresh tape with constant inputs, so it shares no code with the backward
//! rules it checks.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter index, flat entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients of a scalar function against central
/// differences for every entry of every tensor in `params`.
///
/// `f` receives a tape and one leaf per parameter and must return a scalar.
/// `max_entries` caps how many entries per tensor are probed (evenly spaced);
/// `None` probes all of them.
pub fn check<F>(params: &[Tensor], step: f64, max_entries: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(Rc::new(p.clone()))).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| v.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (pi, param) in params.iter().enumerate() {
        let n = param.len();
        let stride = match max_entries {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for entry in (0..n).step_by(stride) {
            let original = param.data()[entry];
            work[pi].data_mut()[entry] = original + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[entry] = original - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[entry] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[entry];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, entry, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Random values bounded away from zero, to stay clear of relu kinks.
    fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn affine_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            random(&[3, 4], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[2], &mut rng),
        ];
        let r = check(&params, FD_STEP, None, |_, v| {
            Ok(v[0].affine(v[1], v[2])?.square().sum())
        })
        .unwrap();
        assert_eq!(r.checked, 12 + 8 + 2);
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn every_elementwise_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = away_from_zero(&[3, 4], &mut rng);
        let pos = x.map(|v| v.abs() + 0.5);
        let y = random(&[3, 4], &mut rng);
        let params = vec![x, pos, y];
        let r = check(&params, FD_STEP, None, |_, v| {
            let a = v[0].relu().add(v[0].sigmoid())?.add(v[0].softplus())?;
            let b = v[1].log()?.mul(v[2].exp())?;
            let c = v[2].clamp(-0.5, 0.5).scale(1.7).add_scalar(0.3).square();
            let d = v[0].sub(v[2])?.mul(v[1])?;
            Ok(a.add(b)?.add(c)?.add(d)?.sum())
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn fused_bernoulli_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&[3, 5], &mut rng).map(|v| 4.0 * v);
        let targets = random(&[3, 5], &mut rng).map(|v| 0.5 * (v + 1.0));
        let r = check(&[logits, targets], FD_STEP, None, |tape, v| {
            let w = tape.constant(Tensor::vector(vec![1.0, -0.4, 2.5]));
            Ok(v[0].bernoulli_log_lik(v[1], 3.0)?.mul(w)?.sum())
        })
        .unwrap();
        assert_eq!(r.checked, 30);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random(&[2, 5], &mut rng), random(&[6, 5], &mut rng)];
        let r = check(&params, FD_STEP, None, |tape, v| {
            let lsm = v[0].log_softmax()?;
            let ent = lsm.row_neg_entropy()?;
            let picked = lsm.pick_cols(&[3, 1])?;
            let rep = v[0].repeat_rows(3).mul(v[1])?;
            let sl = rep.slice_cols(1, 4)?.slice_rows(2, 5)?.square().sum_rows();
            let rs = v[1].reshape(&[3, 10])?.sum_rows().square();
            let w = tape.constant(Tensor::vector(vec![0.3, -1.2, 0.7]));
            let total = ent.add(picked)?.sum().add(sl.sum())?.add(rs.mul(w)?.sum())?;
            Ok(total)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let x = tape.constant(random(&[2, 5], &mut rng).map(|v| v * 10.0));
        let lp = x.log_softmax().unwrap().value();
        for i in 0..2 {
            let s: f64 = lp.row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
