//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::Result;

/// Worst coordinate found by [`grad_check_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all coordinates.
    pub max_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum relative error between backward-mode gradients and central
/// differences with step `eps`.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random projection so
/// that every output entry contributes.
pub fn grad_check(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    grad_check_detailed(f, inputs, eps).map(|r| r.max_error)
}

pub fn grad_check_detailed(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport> {
    let values: Vec<Vec<f64>> = inputs.iter().map(Tensor::to_vec).collect();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .zip(&values)
        .map(|(t, v)| Tensor::param(t.shape(), v.clone()))
        .collect::<Result<_>>()?;

    let out = f(&leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let projection: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let project = |t: &Tensor| -> f64 {
        t.data().iter().zip(&projection).map(|(a, b)| a * b).sum()
    };
    let weights = Tensor::new(out.shape(), projection.clone())?;
    let loss = super::sum(&super::mul(&out, &weights)?);
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(Tensor::grad).collect();

    let evaluate = |which: usize, index: usize, delta: f64| -> Result<f64> {
        let probe: Vec<Tensor> = inputs
            .iter()
            .zip(&values)
            .enumerate()
            .map(|(i, (t, v))| {
                let mut v = v.clone();
                if i == which {
                    v[index] += delta;
                }
                Tensor::new(t.shape(), v)
            })
            .collect::<Result<_>>()?;
        Ok(project(&f(&probe)?))
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (which, grads) in analytic.iter().enumerate() {
        for (index, &a) in grads.iter().enumerate() {
            let numeric = (evaluate(which, index, eps)? - evaluate(which, index, -eps)?) / (2.0 * eps);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_error || err.is_nan() {
                report = GradCheckReport {
                    max_error: err,
                    input: which,
                    index,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{scale, sum};

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::new([1, 2, 2, 2], (0..8).map(|v| v as f64 * 0.3).collect()).unwrap();
        let err = grad_check(|t| Ok(scale(&t[0], 2.5)), &[x], 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A deliberately broken op: forward x², backward claims 1.
        struct Broken;
        impl crate::tensor::GradFn for Broken {
            fn name(&self) -> &'static str {
                "broken"
            }
            fn backward(&self, _: &Tensor, g: &[f64], p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
                vec![Some(vec![g[0]; p[0].numel()])]
            }
        }
        let x = Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check_detailed(
            |t| {
                let d = t[0].data().iter().map(|v| v * v).collect();
                Ok(sum(&Tensor::from_op(t[0].shape(), d, vec![t[0].clone()], Broken)))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(report.max_error > 0.1);
        assert_eq!(report.index, 2);
    }
}
