//! The two-stage cascade: a full-resolution first stage followed by a
//! residual second stage that corrects it at five scales.

use super::network::{Network, ValueScale};
use super::spec::{
    dispfulnet_spec, dispresnet_spec, DISPFULNET_OUTPUTS, DISPRESNET_OUTPUTS, DISPRESNET_RESIDUALS,
};
use crate::error::{Error, Result};
use crate::stereo::{error_map, warp, DisparityMap};
use crate::tensor::{check_same_shape, concat_channels, slice_channels, Precision, Tensor};

/// Model hyper-parameters that fix the layer tables and data conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct CrlConfig {
    pub width1: f64,
    pub width2: f64,
    /// Correlation displacement range of the first stage.
    pub max_disp: usize,
    /// Warp direction: −1 for positive disparities whose right-image match
    /// lies at `x − d`.
    pub sign: f64,
    pub value_scale: ValueScale,
    pub seed: u64,
    /// Start the second stage's residual predictions at zero so that the
    /// untrained cascade returns the first stage's estimate.
    pub zero_init_residuals: bool,
}

impl Default for CrlConfig {
    fn default() -> Self {
        CrlConfig {
            width1: 0.25,
            width2: 0.25,
            max_disp: 6,
            sign: -1.0,
            value_scale: ValueScale::PixelsAtScale,
            seed: 0,
            zero_init_residuals: true,
        }
    }
}

impl CrlConfig {
    /// Correlation range for scenes whose largest disparity is `max_scene_disp`
    /// full-resolution pixels (the correlation runs at quarter resolution).
    pub fn correlation_range(max_scene_disp: f64) -> usize {
        (max_scene_disp / 4.0).ceil() as usize + 2
    }

    pub fn to_text(&self) -> String {
        format!(
            "width1={}\nwidth2={}\nmax_disp={}\nsign={}\nvalue_scale={}\nseed={}\nzero_init_residuals={}\n",
            self.width1,
            self.width2,
            self.max_disp,
            self.sign,
            self.value_scale.as_str(),
            self.seed,
            self.zero_init_residuals
        )
    }

    pub fn from_text(text: &str) -> Result<CrlConfig> {
        let mut cfg = CrlConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                position: n + 1,
                message: format!("{msg}: {line}"),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad("not a number"));
            match key {
                "width1" => cfg.width1 = num(value)?,
                "width2" => cfg.width2 = num(value)?,
                "max_disp" => cfg.max_disp = value.parse().map_err(|_| bad("not an integer"))?,
                "sign" => cfg.sign = num(value)?,
                "value_scale" => {
                    cfg.value_scale = ValueScale::parse(value).ok_or_else(|| bad("unknown policy"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("not an integer"))?,
                "zero_init_residuals" => {
                    cfg.zero_init_residuals = value.parse().map_err(|_| bad("not a boolean"))?
                }
                _ => return Err(bad("unknown key")),
            }
        }
        Ok(cfg)
    }
}

/// Disparity estimates indexed by scale `s` (factor `2^s`), finest first.
#[derive(Debug, Clone)]
pub struct MultiscalePrediction {
    pub maps: Vec<DisparityMap>,
}

impl MultiscalePrediction {
    fn collect(
        env: &std::collections::HashMap<String, Tensor>,
        outputs: &[(u32, &str)],
    ) -> Result<MultiscalePrediction> {
        let maps = outputs
            .iter()
            .map(|(s, name)| DisparityMap::new(env[*name].clone(), *s))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiscalePrediction { maps })
    }

    /// Full-resolution estimate.
    pub fn finest(&self) -> &DisparityMap {
        &self.maps[0]
    }

    pub fn scale(&self, s: u32) -> Option<&DisparityMap> {
        self.maps.iter().find(|m| m.scale == s)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Output of the second stage: refined disparities and the residuals that
/// produced them, both finest first.
#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub d2: MultiscalePrediction,
    pub residuals: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct CrlOutput {
    pub d1: MultiscalePrediction,
    pub d2: MultiscalePrediction,
    pub residuals: Vec<Tensor>,
}

/// The 13-channel second-stage input: left, right, the right image warped
/// by `d1`, the photometric error of that warp, and `d1` itself.
pub fn assemble_stage2_input(left: &Tensor, right: &Tensor, d1: &DisparityMap, sign: f64) -> Result<Tensor> {
    check_same_shape(left, right, "assemble_stage2_input")?;
    if left.channels() != 3 {
        return Err(Error::dim(format!(
            "assemble_stage2_input: images need 3 channels, got {:?}",
            left.shape()
        )));
    }
    let [n, _, h, w] = left.shape();
    if d1.shape() != [n, 1, h, w] {
        return Err(Error::dim(format!(
            "assemble_stage2_input: disparity {:?} does not match images {:?}",
            d1.shape(),
            left.shape()
        )));
    }
    let synth = warp(right, d1, sign)?;
    let err = error_map(left, &synth)?;
    concat_channels(&[left.clone(), right.clone(), synth, err, d1.data.clone()])
}

/// Runs the residual network on an assembled input. The refined estimate at
/// scale `s` is `d1` shrunk by `2^s` plus the residual at that scale.
pub fn forward_stage2(net: &Network, input13: &Tensor, d1: &DisparityMap) -> Result<Stage2Output> {
    if input13.channels() != 13 {
        return Err(Error::dim(format!(
            "forward_stage2: expected 13 input channels, got {}",
            input13.channels()
        )));
    }
    let parts = [
        slice_channels(input13, 0, 3)?,
        slice_channels(input13, 3, 3)?,
        slice_channels(input13, 6, 3)?,
        slice_channels(input13, 9, 3)?,
    ];
    let env = net.forward(&[
        ("left", &parts[0]),
        ("right", &parts[1]),
        ("left_s", &parts[2]),
        ("err", &parts[3]),
        ("pr_s1", &d1.data),
    ])?;
    Ok(Stage2Output {
        d2: MultiscalePrediction::collect(&env, &DISPRESNET_OUTPUTS)?,
        residuals: DISPRESNET_RESIDUALS
            .iter()
            .map(|(_, name)| env[*name].clone())
            .collect(),
    })
}

/// Standardises each channel of each pair to zero mean and unit variance,
/// with statistics pooled over both views so their photometric relation is
/// kept. Constant channels map to zero.
pub fn normalize_pair(left: &Tensor, right: &Tensor) -> Result<(Tensor, Tensor)> {
    check_same_shape(left, right, "normalize_pair")?;
    let [n, c, h, w] = left.shape();
    let plane = h * w;
    let (l, r) = (left.data(), right.data());
    let (mut lo, mut ro) = (l.clone(), r.clone());
    for i in 0..n * c {
        let span = i * plane..(i + 1) * plane;
        let both = || l[span.clone()].iter().chain(&r[span.clone()]);
        let count = (2 * plane) as f64;
        let mean = both().sum::<f64>() / count;
        let var = both().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        for v in lo[span.clone()].iter_mut().chain(ro[span.clone()].iter_mut()) {
            *v = (*v - mean) * inv;
        }
    }
    Ok((Tensor::new(left.shape(), lo)?, Tensor::new(right.shape(), ro)?))
}

/// First stage followed by the second.
pub fn forward_crl(model: &CrlModel, left: &Tensor, right: &Tensor) -> Result<CrlOutput> {
    let (left, right) = &normalize_pair(left, right)?;
    let d1 = model.stage1_normalized(left, right)?;
    let input = assemble_stage2_input(left, right, d1.finest(), model.config.sign)?;
    let out = forward_stage2(&model.stage2, &input, d1.finest())?;
    Ok(CrlOutput {
        d1,
        d2: out.d2,
        residuals: out.residuals,
    })
}

/// Which parameters a training phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    First,
    Second,
    Both,
}

impl Stage {
    pub fn from_digit(d: u8) -> Option<Stage> {
        match d {
            1 => Some(Stage::First),
            2 => Some(Stage::Second),
            0 => Some(Stage::Both),
            _ => None,
        }
    }

    pub fn digit(self) -> u8 {
        match self {
            Stage::First => 1,
            Stage::Second => 2,
            Stage::Both => 0,
        }
    }
}

#[derive(Debug)]
pub struct CrlModel {
    pub config: CrlConfig,
    pub stage1: Network,
    pub stage2: Network,
}

impl CrlModel {
    pub fn new(config: CrlConfig) -> Result<CrlModel> {
        if config.sign != 1.0 && config.sign != -1.0 {
            return Err(Error::usage(format!("warp sign must be ±1, got {}", config.sign)));
        }
        let stage1 = Network::new(
            dispfulnet_spec(config.width1, config.max_disp)?,
            config.seed,
            config.value_scale,
        );
        let stage2 = Network::new(
            dispresnet_spec(config.width2)?,
            config.seed.wrapping_add(1),
            config.value_scale,
        );
        if config.zero_init_residuals {
            for (_, name) in DISPRESNET_RESIDUALS {
                stage2.zero_layer(name)?;
            }
        }
        Ok(CrlModel {
            config,
            stage1,
            stage2,
        })
    }

    /// Layer tables implied by a configuration, without weights.
    pub fn specs(config: &CrlConfig) -> Result<(super::NetSpec, super::NetSpec)> {
        Ok((
            dispfulnet_spec(config.width1, config.max_disp)?,
            dispresnet_spec(config.width2)?,
        ))
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.stage1.set_precision(precision);
        self.stage2.set_precision(precision);
    }

    /// Unfreezes the parameters `stage` trains and freezes the rest.
    pub fn set_trainable(&self, stage: Stage) {
        self.stage1.set_trainable(stage != Stage::Second);
        self.stage2.set_trainable(stage != Stage::First);
    }

    pub fn zero_grad(&self) {
        self.stage1.zero_grad();
        self.stage2.zero_grad();
    }

    /// Forces every residual of the second stage to zero.
    pub fn zero_residuals(&self) -> Result<()> {
        for (_, name) in DISPRESNET_RESIDUALS {
            self.stage2.zero_layer(name)?;
        }
        Ok(())
    }

    /// First-stage predictions; the images are standardised first.
    pub fn forward_stage1(&self, left: &Tensor, right: &Tensor) -> Result<MultiscalePrediction> {
        let (left, right) = normalize_pair(left, right)?;
        self.stage1_normalized(&left, &right)
    }

    fn stage1_normalized(&self, left: &Tensor, right: &Tensor) -> Result<MultiscalePrediction> {
        check_same_shape(left, right, "forward_stage1")?;
        let env = self.stage1.forward(&[("left", left), ("right", right)])?;
        MultiscalePrediction::collect(&env, &DISPFULNET_OUTPUTS)
    }

    pub fn forward(&self, left: &Tensor, right: &Tensor) -> Result<CrlOutput> {
        forward_crl(self, left, right)
    }

    /// Full-resolution `(d1, d2, r2)` for a pair of any size: the images are
    /// edge-padded to the next multiple of the networks' largest factor and
    /// the results cropped back.
    pub fn infer(&self, left: &Tensor, right: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        check_same_shape(left, right, "infer")?;
        let m = self
            .stage1
            .spec()
            .max_factor()
            .max(self.stage2.spec().max_factor());
        let [_, _, h, w] = left.shape();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let out = self.forward(&pad_edge(left, hp, wp), &pad_edge(right, hp, wp))?;
        Ok((
            crop(&out.d1.finest().data, h, w),
            crop(&out.d2.finest().data, h, w),
            crop(&out.residuals[0], h, w),
        ))
    }
}

/// Replicates the last row and column until the map is `h × w`.
pub fn pad_edge(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [_, _, th, tw] = t.shape();
    if (th, tw) == (h, w) {
        return t.clone();
    }
    let src = t.data();
    Tensor::from_fn([t.batch(), t.channels(), h, w], |n, c, y, x| {
        src[((n * t.channels() + c) * th + y.min(th - 1)) * tw + x.min(tw - 1)]
    })
}

/// Top-left `h × w` window of a map, detached from the graph.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [_, c, th, tw] = t.shape();
    let src = t.data();
    Tensor::from_fn([t.batch(), c, h, w], |n, ch, y, x| {
        src[((n * c + ch) * th + y) * tw + x]
    })
}
