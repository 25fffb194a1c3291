//! Gradient certification of every differentiable operator on seeded
//! random inputs kept away from the operators' kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::LEAKY_SLOPE;
use crate::stereo::{bilinear_downsample, correlation1d, masked_l1, warp, DisparityMap};
use crate::tensor::{
    add, concat_channels, conv2d, grad_check_detailed, leaky_relu, transposed_conv2d, ConvSpec,
    GradCheckReport, Shape, Tensor,
};

pub const OPERATORS: [&str; 9] = [
    "conv2d",
    "transposed_conv2d",
    "leaky_relu",
    "concat",
    "add",
    "warp",
    "bilinear_downsample",
    "correlation1d",
    "masked_l1",
];

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

fn uniform(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Values in `±(margin..1)`, so a kink at zero is never within `margin`.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng, margin: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

/// Runs the finite-difference check of operator `name` with inputs drawn
/// from `seed`.
pub fn check_operator(name: &str, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let r = &mut rng;
    match name {
        "conv2d" => {
            let spec = ConvSpec::same(3, 2, 3, 4);
            let inputs = [
                uniform([2, 3, 6, 7], r, -1.0, 1.0),
                uniform(spec.weight_shape(), r, -1.0, 1.0),
                uniform([1, 4, 1, 1], r, -1.0, 1.0),
            ];
            grad_check_detailed(|t| conv2d(&t[0], &t[1], Some(&t[2]), spec), &inputs, eps)
        }
        "transposed_conv2d" => {
            let spec = ConvSpec::same(4, 2, 3, 2);
            let inputs = [
                uniform([2, 3, 3, 4], r, -1.0, 1.0),
                uniform(spec.transposed_weight_shape(), r, -1.0, 1.0),
                uniform([1, 2, 1, 1], r, -1.0, 1.0),
            ];
            grad_check_detailed(
                |t| transposed_conv2d(&t[0], &t[1], Some(&t[2]), spec),
                &inputs,
                eps,
            )
        }
        "leaky_relu" => {
            let x = away_from_zero([2, 3, 4, 5], r, 10.0 * eps);
            grad_check_detailed(|t| Ok(leaky_relu(&t[0], LEAKY_SLOPE)), &[x], eps)
        }
        "concat" => {
            let inputs = [
                uniform([2, 1, 3, 4], r, -1.0, 1.0),
                uniform([2, 3, 3, 4], r, -1.0, 1.0),
                uniform([2, 2, 3, 4], r, -1.0, 1.0),
            ];
            grad_check_detailed(concat_channels, &inputs, eps)
        }
        "add" => {
            let inputs = [uniform([2, 3, 4, 5], r, -1.0, 1.0), uniform([2, 3, 4, 5], r, -1.0, 1.0)];
            grad_check_detailed(|t| add(&t[0], &t[1]), &inputs, eps)
        }
        "warp" => {
            let (h, w) = (4, 12);
            let img = uniform([2, 3, h, w], r, 0.0, 1.0);
            // Fractional parts stay clear of the interpolation kinks at
            // integers and of the clamp at the left border.
            let d = Tensor::from_fn([2, 1, h, w], |_, _, _, x| {
                r.random_range(0..=x.min(4)) as f64 + r.random_range(0.2..0.8)
            });
            grad_check_detailed(
                |t| warp(&t[0], &DisparityMap::new(t[1].clone(), 0)?, -1.0),
                &[img, d],
                eps,
            )
        }
        "bilinear_downsample" => {
            let x = uniform([2, 2, 8, 12], r, -1.0, 1.0);
            grad_check_detailed(
                |t| {
                    let a = bilinear_downsample(&t[0], 2, 0.5)?;
                    let b = bilinear_downsample(&t[0], 4, 0.25)?;
                    // Both factors in one check: project b onto a's grid.
                    let b_up = crate::stereo::bilinear_upsample(&b, 2, 1.0)?;
                    add(&a, &b_up)
                },
                &[x],
                eps,
            )
        }
        "correlation1d" => {
            let inputs = [uniform([2, 3, 3, 8], r, -1.0, 1.0), uniform([2, 3, 3, 8], r, -1.0, 1.0)];
            grad_check_detailed(|t| Ok(correlation1d(&t[0], &t[1], 3)?.data), &inputs, eps)
        }
        "masked_l1" => {
            let p = uniform([2, 1, 4, 5], r, 0.0, 4.0);
            let offsets = away_from_zero(p.shape(), r, 10.0 * eps);
            let g = add(&p, &offsets)?;
            let mask: Vec<bool> = (0..p.numel()).map(|_| r.random_bool(0.7)).collect();
            grad_check_detailed(
                |t| {
                    let pred = DisparityMap::new(t[0].clone(), 0)?;
                    let gt = DisparityMap::new(t[1].clone(), 0)?;
                    masked_l1(&pred, &gt, Some(&mask))
                },
                &[p, g.detach()],
                eps,
            )
        }
        other => Err(Error::usage(format!(
            "unknown operator {other:?}; known: {}",
            OPERATORS.join(", ")
        ))),
    }
}
