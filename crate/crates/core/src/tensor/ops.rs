//! Elementwise, structural and reduction primitives.

use super::{check_same_shape, GradFn, Tensor};
use crate::error::{Error, Result};

struct AddBackward;

impl GradFn for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        parents
            .iter()
            .map(|p| p.requires_grad().then(|| grad.to_vec()))
            .collect()
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(a.shape(), data, vec![a.clone(), b.clone()], AddBackward))
}

struct SubBackward;

impl GradFn for SubBackward {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![
            parents[0].requires_grad().then(|| grad.to_vec()),
            parents[1].requires_grad().then(|| grad.iter().map(|g| -g).collect()),
        ]
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(a.shape(), data, vec![a.clone(), b.clone()], SubBackward))
}

struct MulBackward;

impl GradFn for MulBackward {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let times = |other: &Tensor| -> Vec<f64> {
            grad.iter().zip(other.data().iter()).map(|(g, v)| g * v).collect()
        };
        vec![
            a.requires_grad().then(|| times(b)),
            b.requires_grad().then(|| times(a)),
        ]
    }
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(a.shape(), data, vec![a.clone(), b.clone()], MulBackward))
}

struct ScaleBackward(f64);

impl GradFn for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.0).collect())]
    }
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let data = a.data().iter().map(|v| v * factor).collect();
    Tensor::from_op(a.shape(), data, vec![a.clone()], ScaleBackward(factor))
}

struct AbsBackward;

impl GradFn for AbsBackward {
    fn name(&self) -> &'static str {
        "abs"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let x = parents[0].data();
        vec![Some(grad.iter().zip(x.iter()).map(|(g, v)| g * sign(*v)).collect())]
    }
}

/// Sign with `sign(0) = 0`, the subgradient used at ties.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn abs(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|v| v.abs()).collect();
    Tensor::from_op(a.shape(), data, vec![a.clone()], AbsBackward)
}

struct LeakyReluBackward(f64);

impl GradFn for LeakyReluBackward {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let x = parents[0].data();
        let slope = self.0;
        vec![Some(
            grad.iter()
                .zip(x.iter())
                .map(|(g, &v)| if v >= 0.0 { *g } else { g * slope })
                .collect(),
        )]
    }
}

/// `x` for `x ≥ 0`, `slope·x` otherwise.
pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
    debug_assert!((0.0..1.0).contains(&slope));
    let data = a
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    Tensor::from_op(a.shape(), data, vec![a.clone()], LeakyReluBackward(slope))
}

struct ConcatBackward {
    channels: Vec<usize>,
}

impl GradFn for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, out: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let [n, total, h, w] = out.shape();
        let plane = h * w;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(parents.len());
        for (p, &c) in parents.iter().zip(&self.channels) {
            if p.requires_grad() {
                let mut g = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let start = (b * total + offset) * plane;
                    g.extend_from_slice(&grad[start..start + c * plane]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        grads
    }
}

/// Stacks tensors along the channel axis.
pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::usage("concat_channels needs at least one input"))?;
    let [n, _, h, w] = first.shape();
    for t in inputs {
        let [tn, _, th, tw] = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::dim(format!(
                "concat_channels: {:?} does not match batch/spatial size of {:?}",
                t.shape(),
                first.shape()
            )));
        }
    }
    let channels: Vec<usize> = inputs.iter().map(Tensor::channels).collect();
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.channels();
            data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Ok(Tensor::from_op(
        [n, total, h, w],
        data,
        inputs.to_vec(),
        ConcatBackward { channels },
    ))
}

struct SliceChannelsBackward {
    start: usize,
}

impl GradFn for SliceChannelsBackward {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(&self, out: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let [n, c, h, w] = parents[0].shape();
        let take = out.channels();
        let plane = h * w;
        let mut g = vec![0.0; n * c * plane];
        for b in 0..n {
            let dst = (b * c + self.start) * plane;
            g[dst..dst + take * plane]
                .copy_from_slice(&grad[b * take * plane..(b + 1) * take * plane]);
        }
        vec![Some(g)]
    }
}

/// Channels `start..start + count`.
pub fn slice_channels(a: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    let [n, c, h, w] = a.shape();
    if start + count > c || count == 0 {
        return Err(Error::dim(format!(
            "slice_channels {start}..{} out of range for {c} channels",
            start + count
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * count * plane);
    {
        let src = a.data();
        for b in 0..n {
            let from = (b * c + start) * plane;
            data.extend_from_slice(&src[from..from + count * plane]);
        }
    }
    Ok(Tensor::from_op(
        [n, count, h, w],
        data,
        vec![a.clone()],
        SliceChannelsBackward { start },
    ))
}

struct SliceBatchBackward {
    start: usize,
}

impl GradFn for SliceBatchBackward {
    fn name(&self) -> &'static str {
        "slice_batch"
    }

    fn backward(&self, out: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let item = out.numel() / out.batch();
        let mut g = vec![0.0; parents[0].numel()];
        g[self.start * item..self.start * item + grad.len()].copy_from_slice(grad);
        vec![Some(g)]
    }
}

/// Batch entries `start..start + count`.
pub fn slice_batch(a: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    let [n, c, h, w] = a.shape();
    if start + count > n || count == 0 {
        return Err(Error::dim(format!(
            "slice_batch {start}..{} out of range for batch {n}",
            start + count
        )));
    }
    let item = c * h * w;
    let data = a.data()[start * item..(start + count) * item].to_vec();
    Ok(Tensor::from_op(
        [count, c, h, w],
        data,
        vec![a.clone()],
        SliceBatchBackward { start },
    ))
}

struct SumBackward(f64);

impl GradFn for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0] * self.0; parents[0].numel()])]
    }
}

/// Sum of all entries, as a one-element tensor.
pub fn sum(a: &Tensor) -> Tensor {
    let total = a.data().iter().sum();
    Tensor::from_op([1, 1, 1, 1], vec![total], vec![a.clone()], SumBackward(1.0))
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel().max(1) as f64;
    let total: f64 = a.data().iter().sum();
    Tensor::from_op(
        [1, 1, 1, 1],
        vec![total / n],
        vec![a.clone()],
        SumBackward(1.0 / n),
    )
}
