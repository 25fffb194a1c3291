//! Runs a [`NetSpec`] layer table over named input tensors.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::spec::{LayerKind, LayerSpec, NetSpec};
use crate::error::{Error, Result};
use crate::stereo::{bilinear_downsample, bilinear_upsample, correlation1d};
use crate::tensor::{
    add, concat_channels, conv2d, leaky_relu, transposed_conv2d, ConvSpec, Precision, Tensor,
};

/// Negative slope of the rectifier after every non-prediction layer.
pub const LEAKY_SLOPE: f64 = 0.1;

/// How disparity values change when a map is resampled by a factor `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueScale {
    /// Values are pixels at the map's own scale: divide by `f` when
    /// shrinking, multiply when magnifying.
    #[default]
    PixelsAtScale,
    /// Values are left unchanged.
    Keep,
}

impl ValueScale {
    pub fn shrink(self, factor: usize) -> f64 {
        match self {
            ValueScale::PixelsAtScale => 1.0 / factor as f64,
            ValueScale::Keep => 1.0,
        }
    }

    pub fn grow(self, factor: usize) -> f64 {
        match self {
            ValueScale::PixelsAtScale => factor as f64,
            ValueScale::Keep => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValueScale::PixelsAtScale => "pixels-at-scale",
            ValueScale::Keep => "keep",
        }
    }

    pub fn parse(s: &str) -> Option<ValueScale> {
        match s {
            "pixels-at-scale" => Some(ValueScale::PixelsAtScale),
            "keep" => Some(ValueScale::Keep),
            _ => None,
        }
    }
}

/// A layer table with its parameters.
#[derive(Debug)]
pub struct Network {
    spec: NetSpec,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    precision: Precision,
    value_scale: ValueScale,
}

fn conv_spec(layer: &LayerSpec) -> ConvSpec {
    ConvSpec::same(
        layer.kernel.unwrap_or(1),
        layer.stride.unwrap_or(1),
        layer.in_channels,
        layer.out_channels,
    )
}

/// Fan-in scaled uniform initialisation for rectified layers.
fn init_weights(layer: &LayerSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let spec = conv_spec(layer);
    let k2 = spec.kernel * spec.kernel;
    let (shape, fan_in) = match layer.kind {
        LayerKind::Upconv => (
            spec.transposed_weight_shape(),
            (spec.in_channels * k2 / (spec.stride * spec.stride)).max(1),
        ),
        _ => (spec.weight_shape(), spec.in_channels * k2),
    };
    let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
    (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}

/// Weights of a one-channel 4×4 stride-2 transposed convolution that performs
/// exact bilinear ×2 magnification, scaled by `gain`.
fn bilinear_upconv_weights(gain: f64) -> Vec<f64> {
    let taps = [0.25, 0.75, 0.75, 0.25];
    let mut w = Vec::with_capacity(16);
    for a in taps {
        for b in taps {
            w.push(a * b * gain);
        }
    }
    w
}

impl Network {
    /// Instantiates the table with seeded random weights. Linear one-channel
    /// up-convolutions start as bilinear magnifiers.
    pub fn new(spec: NetSpec, seed: u64, value_scale: ValueScale) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &spec.layers {
            if !layer.kind.has_weights() || layer.shared_with.is_some() {
                continue;
            }
            let cs = conv_spec(layer);
            let (shape, data) = if layer.kind == LayerKind::Upconv {
                let data = if !layer.activated && layer.in_channels == 1 && layer.out_channels == 1 {
                    bilinear_upconv_weights(value_scale.grow(2))
                } else {
                    init_weights(layer, &mut rng)
                };
                (cs.transposed_weight_shape(), data)
            } else {
                (cs.weight_shape(), init_weights(layer, &mut rng))
            };
            params.push((
                format!("{}.weight", layer.name),
                Tensor::param(shape, data).expect("shape from spec"),
            ));
            params.push((
                format!("{}.bias", layer.name),
                Tensor::param([1, layer.out_channels, 1, 1], vec![0.0; layer.out_channels])
                    .expect("shape from spec"),
            ));
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Network {
            spec,
            params,
            index,
            precision: Precision::Double,
            value_scale,
        }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn value_scale(&self) -> ValueScale {
        self.value_scale
    }

    /// Freezes (`false`) or unfreezes every parameter.
    pub fn set_trainable(&self, on: bool) {
        for (_, t) in &self.params {
            t.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    /// Sets the weights and bias of one layer to zero.
    pub fn zero_layer(&self, name: &str) -> Result<()> {
        let mut found = false;
        for suffix in ["weight", "bias"] {
            if let Some(t) = self.param(&format!("{name}.{suffix}")) {
                t.update_data(|d| d.fill(0.0));
                found = true;
            }
        }
        if !found {
            return Err(Error::usage(format!("no parameters for layer {name}")));
        }
        Ok(())
    }

    /// SHA-256 over parameter names and the exact bytes of their values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.params {
            hasher.update(name.as_bytes());
            for v in t.data().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn weights(&self, layer: &LayerSpec) -> (&Tensor, &Tensor) {
        let owner = layer.shared_with.as_deref().unwrap_or(&layer.name);
        let w = self.param(&format!("{owner}.weight")).expect("weights exist for spec");
        let b = self.param(&format!("{owner}.bias")).expect("bias exists for spec");
        (w, b)
    }

    /// Runs every layer and returns all named activations (inputs included).
    pub fn forward(&self, inputs: &[(&str, &Tensor)]) -> Result<HashMap<String, Tensor>> {
        let mut env: HashMap<String, Tensor> = HashMap::new();
        let mut size = None;
        for (name, channels) in &self.spec.inputs {
            let t = inputs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| (*t).clone())
                .ok_or_else(|| Error::usage(format!("{}: missing input {name}", self.spec.name)))?;
            if t.channels() != *channels {
                return Err(Error::dim(format!(
                    "{}: input {name} has {} channels, expected {channels}",
                    self.spec.name,
                    t.channels()
                )));
            }
            let hw = (t.batch(), t.height(), t.width());
            if *size.get_or_insert(hw) != hw {
                return Err(Error::dim(format!(
                    "{}: input {name} has batch/size {hw:?}, others {:?}",
                    self.spec.name,
                    size.unwrap()
                )));
            }
            env.insert(name.clone(), t);
        }
        let (_, h, w) = size.ok_or_else(|| Error::usage("network without inputs"))?;
        let factor = self.spec.max_factor();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::dim(format!(
                "{}: input size {h}×{w} is not divisible by {factor}",
                self.spec.name
            )));
        }

        for layer in &self.spec.layers {
            let out = self.run_layer(layer, &env)?;
            env.insert(layer.name.clone(), out);
        }
        Ok(env)
    }

    fn gather(&self, layer: &LayerSpec, env: &HashMap<String, Tensor>) -> Result<Vec<Tensor>> {
        let mut parts = Vec::with_capacity(layer.inputs.len());
        for name in &layer.inputs {
            let t = env
                .get(name)
                .ok_or_else(|| Error::usage(format!("layer {} reads undefined {name}", layer.name)))?
                .clone();
            let t = match parts.first().map(Tensor::height) {
                Some(h) if t.height() < h => {
                    let ratio = h / t.height();
                    bilinear_upsample(&t, ratio, self.value_scale.grow(ratio))?
                }
                _ => t,
            };
            parts.push(t);
        }
        Ok(parts)
    }

    fn run_layer(&self, layer: &LayerSpec, env: &HashMap<String, Tensor>) -> Result<Tensor> {
        let parts = self.gather(layer, env)?;
        let joined = || -> Result<Tensor> {
            if parts.len() == 1 {
                Ok(parts[0].clone())
            } else {
                concat_channels(&parts)
            }
        };
        let out = match layer.kind {
            LayerKind::Conv | LayerKind::Prediction => {
                let (w, b) = self.weights(layer);
                conv2d(&joined()?, w, Some(b), conv_spec(layer).with_precision(self.precision))?
            }
            LayerKind::Upconv => {
                let (w, b) = self.weights(layer);
                transposed_conv2d(
                    &joined()?,
                    w,
                    Some(b),
                    conv_spec(layer).with_precision(self.precision),
                )?
            }
            LayerKind::Downsample => {
                let f = layer.out_factor / layer.in_factor;
                bilinear_downsample(&parts[0], f, self.value_scale.shrink(f))?
            }
            LayerKind::ElementwiseSum => add(&parts[0], &parts[1])?,
            LayerKind::Correlation => {
                correlation1d(&parts[0], &parts[1], layer.out_channels - 1)?.data
            }
        };
        Ok(if layer.activated {
            leaky_relu(&out, LEAKY_SLOPE)
        } else {
            out
        })
    }
}
