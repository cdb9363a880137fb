//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub tol: f64,
    /// Relative step; the step for coordinate `i` is `step · max(1, |xᵢ|)`.
    pub step: f64,
    /// Denominator floor in `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per input tensor (sampled).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tol: 1e-4,
            step: 1e-5,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions {
            tol,
            ..Default::default()
        }
    }

    pub fn sampled(max_coords: usize, seed: u64) -> Self {
        GradCheckOptions {
            max_coords: Some(max_coords),
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of a scalar function of several inputs against
/// central differences.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        pass: true,
    };
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = input.data()[i];
            let h = opts.step * x0.abs().max(1.0);
            work[ti].data_mut()[i] = x0 + h;
            let fp = eval_scalar(&f, &work)?;
            work[ti].data_mut()[i] = x0 - h;
            let fm = eval_scalar(&f, &work)?;
            work[ti].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, i));
            }
        }
    }
    report.pass = report.max_rel_err <= opts.tol;
    Ok(report)
}

/// Single-input convenience wrapper around [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), &GradCheckOptions::with_tol(tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_has_no_error() {
        let x = Tensor::from_fn([3, 4], |i| i as f64 * 0.3 - 1.0);
        let r = grad_check(|t, v| t.sum(v), &x, 1e-4).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::<f64>::ones([2]);
        assert!(grad_check(|_, v| Ok(v), &x, 1e-4).is_err());
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = Tensor::from_fn([50], |i| (i as f64).sin());
        let r = grad_check_many(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        }, &[x], &GradCheckOptions::sampled(7, 3))
        .unwrap();
        assert_eq!(r.checked, 7);
        assert!(r.pass);
    }
}
