//! Declarative layer tables for the two stages.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Convolution followed by a leaky rectifier.
    Conv,
    /// Transposed convolution, followed by a leaky rectifier when the layer
    /// is `activated`.
    Upconv,
    /// Bilinear downsampling of a disparity map.
    Downsample,
    /// Elementwise sum of exactly two inputs.
    ElementwiseSum,
    /// One-channel convolution without activation.
    Prediction,
    /// 1-D correlation of two feature maps; `out_channels − 1` is the
    /// maximum displacement.
    Correlation,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Upconv => "upconv",
            LayerKind::Downsample => "downsample",
            LayerKind::ElementwiseSum => "sum",
            LayerKind::Prediction => "prediction",
            LayerKind::Correlation => "correlation",
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Upconv | LayerKind::Prediction)
    }
}

/// One row of a layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Concatenated in order, or summed for [`LayerKind::ElementwiseSum`].
    pub inputs: Vec<String>,
    /// Downsampling factor of the input relative to the network input.
    pub in_factor: usize,
    pub out_factor: usize,
    pub activated: bool,
    /// Reuse the weights of another layer (siamese branches).
    pub shared_with: Option<String>,
}

/// An ordered layer table together with the data inputs it consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub name: String,
    pub width: f64,
    pub inputs: Vec<(String, usize)>,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Largest downsampling factor reached anywhere in the table; inputs must
    /// be divisible by it.
    pub fn max_factor(&self) -> usize {
        self.layers.iter().map(|l| l.out_factor.max(l.in_factor)).max().unwrap_or(1)
    }

    /// Text rendering of the table, one row per layer; stored in checkpoints
    /// and compared on load.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "net {} width={}", self.name, self.width);
        for (name, c) in &self.inputs {
            let _ = writeln!(out, "input {name} {c}");
        }
        for l in &self.layers {
            let dash = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{} {} {} {} {}/{} {} {} {}{}{}",
                l.name,
                l.kind.as_str(),
                dash(l.kernel),
                dash(l.stride),
                l.in_channels,
                l.out_channels,
                l.in_factor,
                l.out_factor,
                l.inputs.join("+"),
                if l.activated { " act" } else { "" },
                l.shared_with
                    .as_ref()
                    .map_or(String::new(), |s| format!(" shares={s}")),
            );
        }
        out
    }
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Channel count scaled by a width multiplier, rounded up, at least 1.
pub fn scaled_channels(base: usize, width: f64) -> usize {
    ((base as f64 * width - 1e-9).ceil() as usize).max(1)
}

fn check_width(width: f64) -> Result<()> {
    if !(width > 0.0 && width <= 1.0) {
        return Err(Error::usage(format!("width multiplier must lie in (0, 1], got {width}")));
    }
    Ok(())
}

/// Builds a table while tracking channels and downsampling factors of every
/// named tensor, so wiring errors surface at construction.
struct TableBuilder {
    spec: NetSpec,
    shapes: HashMap<String, (usize, usize)>,
}

impl TableBuilder {
    fn new(name: &str, width: f64, inputs: &[(&str, usize)]) -> TableBuilder {
        let inputs: Vec<(String, usize)> = inputs.iter().map(|(n, c)| (n.to_string(), *c)).collect();
        let shapes = inputs.iter().map(|(n, c)| (n.clone(), (*c, 1))).collect();
        TableBuilder {
            spec: NetSpec {
                name: name.to_string(),
                width,
                inputs,
                layers: Vec::new(),
            },
            shapes,
        }
    }

    /// Total channels and the factor of the first input. Later inputs may be
    /// coarser (predictions fed back into the decoder); they are magnified
    /// to the first input's resolution when the table is run.
    fn gather(&self, inputs: &[&str]) -> (usize, usize) {
        let mut channels = 0;
        let mut factor = None;
        for name in inputs {
            let (c, f) = *self
                .shapes
                .get(*name)
                .unwrap_or_else(|| panic!("layer table refers to unknown tensor {name}"));
            channels += c;
            match factor {
                None => factor = Some(f),
                Some(first) => assert!(
                    f >= first && f % first == 0,
                    "layer table feeds {name} at factor {f} into a layer at factor {first}"
                ),
            }
        }
        (channels, factor.expect("layer without inputs"))
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: &str,
        kind: LayerKind,
        kernel: Option<usize>,
        stride: Option<usize>,
        inputs: &[&str],
        out_channels: usize,
        out_factor: Option<usize>,
        activated: bool,
    ) -> &mut LayerSpec {
        let (in_channels, in_factor) = self.gather(inputs);
        let out_factor = out_factor.unwrap_or(match kind {
            LayerKind::Upconv => in_factor / stride.unwrap_or(1),
            _ => in_factor * stride.unwrap_or(1),
        });
        self.shapes.insert(name.to_string(), (out_channels, out_factor));
        self.spec.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            kernel,
            stride,
            in_channels,
            out_channels,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            in_factor,
            out_factor,
            activated,
            shared_with: None,
        });
        self.spec.layers.last_mut().unwrap()
    }

    fn conv(&mut self, name: &str, k: usize, s: usize, inputs: &[&str], out: usize) {
        self.push(name, LayerKind::Conv, Some(k), Some(s), inputs, out, None, true);
    }

    fn upconv(&mut self, name: &str, inputs: &[&str], out: usize, activated: bool) {
        self.push(name, LayerKind::Upconv, Some(4), Some(2), inputs, out, None, activated);
    }

    fn prediction(&mut self, name: &str, k: usize, inputs: &[&str]) {
        self.push(name, LayerKind::Prediction, Some(k), Some(1), inputs, 1, None, false);
    }

    fn downsample(&mut self, name: &str, input: &str, factor: usize) {
        self.push(
            name,
            LayerKind::Downsample,
            None,
            None,
            &[input],
            1,
            Some(factor),
            false,
        );
    }

    fn sum(&mut self, name: &str, a: &str, b: &str) {
        let (ca, _) = self.gather(&[a]);
        let layer = self.push(name, LayerKind::ElementwiseSum, None, None, &[a, b], ca, None, false);
        // Summation keeps the channel count of one operand.
        layer.in_channels = ca;
    }

    fn finish(self) -> NetSpec {
        self.spec
    }
}

/// Second stage: the residual hour-glass network with five supervised
/// scales. Channel counts are the base table scaled by `width`; the 13 data
/// channels and the 1-channel predictions are fixed.
pub fn dispresnet_spec(width: f64) -> Result<NetSpec> {
    check_width(width)?;
    let c = |base| scaled_channels(base, width);
    let mut b = TableBuilder::new(
        "dispresnet",
        width,
        &[("left", 3), ("right", 3), ("left_s", 3), ("err", 3), ("pr_s1", 1)],
    );
    b.conv("conv1", 5, 1, &["left", "right", "left_s", "err", "pr_s1"], c(64));
    b.conv("conv2", 5, 2, &["conv1"], c(128));
    b.conv("conv2_1", 3, 1, &["conv2"], c(128));
    b.conv("conv3", 3, 2, &["conv2_1"], c(256));
    b.conv("conv3_1", 3, 1, &["conv3"], c(256));
    b.conv("conv4", 3, 2, &["conv3_1"], c(512));
    b.conv("conv4_1", 3, 1, &["conv4"], c(512));
    b.conv("conv5", 3, 2, &["conv4_1"], c(1024));
    b.conv("conv5_1", 3, 1, &["conv5"], c(1024));

    b.prediction("res_16", 3, &["conv5_1"]);
    b.downsample("pr_s1_16", "pr_s1", 16);
    b.sum("pr_s2_16", "pr_s1_16", "res_16");

    b.upconv("upconv4", &["conv5_1"], c(512), true);
    b.conv("iconv4", 3, 1, &["upconv4", "conv4_1", "pr_s2_16"], c(512));
    b.prediction("res_8", 3, &["iconv4"]);
    b.downsample("pr_s1_8", "pr_s1", 8);
    b.sum("pr_s2_8", "pr_s1_8", "res_8");

    b.upconv("upconv3", &["iconv4"], c(256), true);
    b.conv("iconv3", 3, 1, &["upconv3", "conv3_1", "pr_s2_8"], c(256));
    b.prediction("res_4", 3, &["iconv3"]);
    b.downsample("pr_s1_4", "pr_s1", 4);
    b.sum("pr_s2_4", "pr_s1_4", "res_4");

    b.upconv("upconv2", &["iconv3"], c(128), true);
    b.conv("iconv2", 3, 1, &["upconv2", "conv2_1", "pr_s2_4"], c(128));
    b.prediction("res_2", 3, &["iconv2"]);
    b.downsample("pr_s1_2", "pr_s1", 2);
    b.sum("pr_s2_2", "pr_s1_2", "res_2");

    b.upconv("upconv1", &["iconv2"], c(64), true);
    b.prediction("res_1", 5, &["upconv1", "conv1", "pr_s2_2"]);
    b.sum("pr_s2", "pr_s1", "res_1");
    Ok(b.finish())
}

/// Outputs of the second stage, finest first: `(scale, layer name)`.
pub const DISPRESNET_OUTPUTS: [(u32, &str); 5] = [
    (0, "pr_s2"),
    (1, "pr_s2_2"),
    (2, "pr_s2_4"),
    (3, "pr_s2_8"),
    (4, "pr_s2_16"),
];

/// Residual layers matching [`DISPRESNET_OUTPUTS`].
pub const DISPRESNET_RESIDUALS: [(u32, &str); 5] = [
    (0, "res_1"),
    (1, "res_2"),
    (2, "res_4"),
    (3, "res_8"),
    (4, "res_16"),
];

/// First stage: a correlation hour-glass in the DispNetC mould whose decoder
/// continues to full resolution. The two extra up-convolutions take the
/// last decoder features and the last prediction; their outputs are
/// concatenated with the left image and reduced to one channel.
pub fn dispfulnet_spec(width: f64, max_disp: usize) -> Result<NetSpec> {
    check_width(width)?;
    let c = |base| scaled_channels(base, width);
    let mut b = TableBuilder::new("dispfulnet", width, &[("left", 3), ("right", 3)]);
    b.conv("conv1a", 7, 2, &["left"], c(64));
    b.conv("conv1b", 7, 2, &["right"], c(64));
    b.spec.layers.last_mut().unwrap().shared_with = Some("conv1a".into());
    b.conv("conv2a", 5, 2, &["conv1a"], c(128));
    b.conv("conv2b", 5, 2, &["conv1b"], c(128));
    b.spec.layers.last_mut().unwrap().shared_with = Some("conv2a".into());
    b.push(
        "corr",
        LayerKind::Correlation,
        None,
        None,
        &["conv2a", "conv2b"],
        max_disp + 1,
        None,
        false,
    );
    // The correlation consumes two maps; it does not concatenate them.
    let corr = b.spec.layers.last_mut().unwrap();
    corr.in_channels = c(128);
    b.conv("conv_redir", 1, 1, &["conv2a"], c(64));
    b.conv("conv3", 5, 2, &["corr", "conv_redir"], c(256));
    b.conv("conv3_1", 3, 1, &["conv3"], c(256));
    b.conv("conv4", 3, 2, &["conv3_1"], c(512));
    b.conv("conv4_1", 3, 1, &["conv4"], c(512));
    b.conv("conv5", 3, 2, &["conv4_1"], c(512));
    b.conv("conv5_1", 3, 1, &["conv5"], c(512));
    b.conv("conv6", 3, 2, &["conv5_1"], c(1024));
    b.conv("conv6_1", 3, 1, &["conv6"], c(1024));

    b.prediction("pr_64", 3, &["conv6_1"]);
    let levels = [
        // (upconv, features in, skip, out channels, coarser prediction, prediction name)
        ("upconv5", "conv6_1", "conv5_1", 512, "pr_64", "iconv5", "pr_32"),
        ("upconv4", "iconv5", "conv4_1", 256, "pr_32", "iconv4", "pr_16"),
        ("upconv3", "iconv4", "conv3_1", 128, "pr_16", "iconv3", "pr_8"),
        ("upconv2", "iconv3", "conv2a", 64, "pr_8", "iconv2", "pr_4"),
        ("upconv1", "iconv2", "conv1a", 32, "pr_4", "iconv1", "pr_2"),
    ];
    for (up, feat, skip, out, coarse, iconv, pred) in levels {
        let up_pred = format!("up_{coarse}");
        b.upconv(up, &[feat], c(out), true);
        b.upconv(&up_pred, &[coarse], 1, false);
        b.conv(iconv, 3, 1, &[up, &up_pred, skip], c(out));
        b.prediction(pred, 3, &[iconv]);
    }
    b.upconv("upconv0", &["iconv1"], c(16), true);
    b.upconv("up_pr_2", &["pr_2"], 1, false);
    b.prediction("pr_1", 5, &["upconv0", "up_pr_2", "left"]);
    Ok(b.finish())
}

/// Supervised outputs of the first stage, finest first.
pub const DISPFULNET_OUTPUTS: [(u32, &str); 7] = [
    (0, "pr_1"),
    (1, "pr_2"),
    (2, "pr_4"),
    (3, "pr_8"),
    (4, "pr_16"),
    (5, "pr_32"),
    (6, "pr_64"),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_channels_rounding() {
        assert_eq!(scaled_channels(64, 1.0), 64);
        assert_eq!(scaled_channels(64, 0.25), 16);
        assert_eq!(scaled_channels(13, 0.1), 2);
        assert_eq!(scaled_channels(1, 0.01), 1);
    }

    #[test]
    fn halving_width_halves_channels_rounded_up() {
        for w in [1.0, 0.5, 0.25, 0.3] {
            let full = dispfulnet_spec(w, 6).unwrap();
            let half = dispfulnet_spec(w / 2.0, 6).unwrap();
            for (a, b) in full.layers.iter().zip(&half.layers) {
                if a.kind == LayerKind::Prediction || a.out_channels == 1 {
                    assert_eq!(b.out_channels, 1);
                } else if a.kind != LayerKind::Correlation {
                    assert_eq!(b.out_channels, a.out_channels.div_ceil(2), "{} at w={w}", a.name);
                }
            }
        }
    }

    #[test]
    fn dispfulnet_reaches_full_resolution() {
        let s = dispfulnet_spec(1.0, 40).unwrap();
        let last = s.layer("pr_1").unwrap();
        assert_eq!((last.out_factor, last.out_channels), (1, 1));
        assert_eq!(last.inputs.last().unwrap(), "left");
        assert_eq!(s.max_factor(), 64);
        assert_eq!(DISPFULNET_OUTPUTS.len(), 7);
        for (scale, name) in DISPFULNET_OUTPUTS {
            assert_eq!(s.layer(name).unwrap().out_factor, 1 << scale, "{name}");
        }
        assert_eq!(s.layer("corr").unwrap().out_channels, 41);
    }

    #[test]
    fn width_is_validated() {
        assert!(dispresnet_spec(0.0).is_err());
        assert!(dispresnet_spec(1.5).is_err());
        assert!(dispfulnet_spec(-1.0, 4).is_err());
    }

    #[test]
    fn render_lists_every_layer() {
        let s = dispresnet_spec(1.0).unwrap();
        let text = s.render();
        assert_eq!(text.lines().count(), 1 + 5 + s.layers.len());
        assert!(text.contains("res_1 prediction 5 1 129/1 1 1 upconv1+conv1+pr_s2_2"));
    }
}
