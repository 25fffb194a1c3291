//! Differentiable stereo operators: horizontal warping, bilinear
//! downsampling, 1-D correlation, photometric error and masked ℓ1 loss.

use crate::error::{Error, Result};
use crate::tensor::{abs, check_same_shape, sub, GradFn, Tensor};

/// Per-pixel horizontal disparity, `N×1×H×W`, in pixels measured at its
/// own scale (`2^scale` below full resolution).
#[derive(Debug, Clone)]
pub struct DisparityMap {
    pub data: Tensor,
    pub scale: u32,
    /// `None` means every pixel is valid.
    pub valid_mask: Option<Vec<bool>>,
}

impl DisparityMap {
    pub fn new(data: Tensor, scale: u32) -> Result<DisparityMap> {
        if data.channels() != 1 {
            return Err(Error::dim(format!(
                "disparity maps have one channel, got shape {:?}",
                data.shape()
            )));
        }
        Ok(DisparityMap {
            data,
            scale,
            valid_mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<DisparityMap> {
        if mask.len() != self.data.numel() {
            return Err(Error::dim(format!(
                "mask has {} entries for a {:?} disparity map",
                mask.len(),
                self.data.shape()
            )));
        }
        self.valid_mask = Some(mask);
        Ok(self)
    }

    pub fn shape(&self) -> crate::Shape {
        self.data.shape()
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.valid_mask.as_ref().is_none_or(|m| m[index])
    }

    pub fn valid_count(&self) -> usize {
        match &self.valid_mask {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => self.data.numel(),
        }
    }
}

/// Correlation scores, `N×(D+1)×H×W`; channel `k` holds displacement `k`.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub data: Tensor,
    pub max_displacement: usize,
}

/// Sample position, its clamped integer neighbours and interpolation weight
/// for a horizontal lookup at `xs` in a row of `width` pixels. The last field
/// is `false` when clamping made the position insensitive to `xs`.
#[inline]
fn horizontal_tap(xs: f64, width: usize) -> (usize, usize, f64, bool) {
    let max = (width - 1) as f64;
    let inside = (0.0..max).contains(&xs);
    let xs = xs.clamp(0.0, max);
    let x0 = xs.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    (x0, x1, xs - x0 as f64, inside)
}

struct WarpBackward {
    sign: f64,
}

impl GradFn for WarpBackward {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (image, disp) = (&parents[0], &parents[1]);
        let [n, c, h, w] = image.shape();
        let img = image.data();
        let d = disp.data();
        let mut gi = image.requires_grad().then(|| vec![0.0; image.numel()]);
        let mut gd = disp.requires_grad().then(|| vec![0.0; disp.numel()]);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let di = (b * h + y) * w + x;
                    let (x0, x1, a, inside) = horizontal_tap(x as f64 + self.sign * d[di], w);
                    let mut slope = 0.0;
                    for ch in 0..c {
                        let row = ((b * c + ch) * h + y) * w;
                        let g = grad[row + x];
                        if let Some(gi) = gi.as_mut() {
                            gi[row + x0] += (1.0 - a) * g;
                            gi[row + x1] += a * g;
                        }
                        slope += g * (img[row + x1] - img[row + x0]);
                    }
                    if let Some(gd) = gd.as_mut() {
                        if inside {
                            gd[di] = self.sign * slope;
                        }
                    }
                }
            }
        }
        vec![gi, gd]
    }
}

/// Resamples `image` horizontally: `out(x, y) = image(x + sign·d(x, y), y)`
/// with linear interpolation and clamp-to-edge sampling. Differentiable in
/// both the image and the disparity.
pub fn warp(image: &Tensor, disparity: &DisparityMap, sign: f64) -> Result<Tensor> {
    let [n, c, h, w] = image.shape();
    let d = &disparity.data;
    if d.shape() != [n, 1, h, w] {
        return Err(Error::dim(format!(
            "warp: disparity {:?} does not match image {:?}",
            d.shape(),
            image.shape()
        )));
    }
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::usage(format!("warp sign must be ±1, got {sign}")));
    }
    let mut out = vec![0.0; image.numel()];
    {
        let img = image.data();
        let dv = d.data();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (x0, x1, a, _) = horizontal_tap(x as f64 + sign * dv[(b * h + y) * w + x], w);
                    for ch in 0..c {
                        let row = ((b * c + ch) * h + y) * w;
                        out[row + x] = (1.0 - a) * img[row + x0] + a * img[row + x1];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        image.shape(),
        out,
        vec![image.clone(), d.clone()],
        WarpBackward { sign },
    ))
}

/// `|a − b|` per pixel and channel; the subgradient at ties is 0.
pub fn error_map(left: &Tensor, warped: &Tensor) -> Result<Tensor> {
    check_same_shape(left, warped, "error_map")?;
    Ok(abs(&sub(left, warped)?))
}

/// Two taps and weights of a centre-aligned bilinear resampling by an
/// integer `factor` along one axis.
#[inline]
pub(crate) fn downsample_taps(o: usize, factor: usize) -> [(usize, f64); 2] {
    if factor == 1 {
        return [(o, 1.0), (o, 0.0)];
    }
    // Output centre (o + ½)·f − ½ lies halfway between two input pixels when
    // f is even, and on a pixel when f is odd.
    let pos = (o as f64 + 0.5) * factor as f64 - 0.5;
    let i0 = pos.floor() as usize;
    let a = pos - i0 as f64;
    [(i0, 1.0 - a), (i0 + 1, a)]
}

/// Taps for magnifying by `factor`, clamping at the borders.
#[inline]
fn upsample_taps(o: usize, factor: usize, len: usize) -> [(usize, f64); 2] {
    let pos = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    let a = pos - i0 as f64;
    [(i0, 1.0 - a), (i1, a)]
}

/// Separable linear resampling with precomputed taps per output row and
/// column.
struct Resample {
    rows: Vec<[(usize, f64); 2]>,
    cols: Vec<[(usize, f64); 2]>,
    value_scale: f64,
}

impl Resample {
    fn apply(self, input: &Tensor) -> Tensor {
        let [n, c, h, w] = input.shape();
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut out = vec![0.0; n * c * oh * ow];
        {
            let x = input.data();
            for plane in 0..n * c {
                let src = &x[plane * h * w..(plane + 1) * h * w];
                for (oy, ty) in self.rows.iter().enumerate() {
                    for (ox, tx) in self.cols.iter().enumerate() {
                        let mut acc = 0.0;
                        for &(iy, wy) in ty {
                            if wy == 0.0 {
                                continue;
                            }
                            for &(ix, wx) in tx {
                                if wx != 0.0 {
                                    acc += wy * wx * src[iy * w + ix];
                                }
                            }
                        }
                        out[(plane * oh + oy) * ow + ox] = acc * self.value_scale;
                    }
                }
            }
        }
        Tensor::from_op([n, c, oh, ow], out, vec![input.clone()], self)
    }
}

impl GradFn for Resample {
    fn name(&self) -> &'static str {
        "bilinear_resample"
    }

    fn backward(&self, out: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let [n, c, h, w] = parents[0].shape();
        let (oh, ow) = (out.height(), out.width());
        let mut g = vec![0.0; parents[0].numel()];
        for plane in 0..n * c {
            let dst = &mut g[plane * h * w..(plane + 1) * h * w];
            for (oy, ty) in self.rows.iter().enumerate() {
                for (ox, tx) in self.cols.iter().enumerate() {
                    let go = grad[(plane * oh + oy) * ow + ox] * self.value_scale;
                    for &(iy, wy) in ty {
                        if wy == 0.0 {
                            continue;
                        }
                        for &(ix, wx) in tx {
                            if wx != 0.0 {
                                dst[iy * w + ix] += wy * wx * go;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

/// Shrinks the spatial size by `factor` with bilinear sampling at the output
/// pixel centres, then multiplies every value by `value_scale` (use
/// `1/factor` to keep disparities in pixels of the new scale).
pub fn bilinear_downsample(input: &Tensor, factor: usize, value_scale: f64) -> Result<Tensor> {
    let [_, _, h, w] = input.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(format!(
            "bilinear_downsample: factor {factor} does not divide {h}×{w}"
        )));
    }
    let resample = Resample {
        rows: (0..h / factor).map(|o| downsample_taps(o, factor)).collect(),
        cols: (0..w / factor).map(|o| downsample_taps(o, factor)).collect(),
        value_scale,
    };
    Ok(resample.apply(input))
}

/// Magnifies the spatial size by `factor` with centre-aligned bilinear
/// interpolation (clamped at the borders), then multiplies every value by
/// `value_scale`.
pub fn bilinear_upsample(input: &Tensor, factor: usize, value_scale: f64) -> Result<Tensor> {
    let [_, _, h, w] = input.shape();
    if factor == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "bilinear_upsample: factor {factor} on {h}×{w}"
        )));
    }
    let resample = Resample {
        rows: (0..h * factor).map(|o| upsample_taps(o, factor, h)).collect(),
        cols: (0..w * factor).map(|o| upsample_taps(o, factor, w)).collect(),
        value_scale,
    };
    Ok(resample.apply(input))
}

/// Validity of each downsampled pixel: valid only if every input pixel
/// with a non-zero bilinear weight is valid.
pub fn downsample_mask(mask: &[bool], shape: crate::Shape, factor: usize) -> Result<Vec<bool>> {
    let [n, c, h, w] = shape;
    if mask.len() != n * c * h * w {
        return Err(Error::dim("downsample_mask: mask length does not match shape"));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(format!(
            "downsample_mask: factor {factor} does not divide {h}×{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            let ty = downsample_taps(oy, factor);
            for ox in 0..ow {
                let tx = downsample_taps(ox, factor);
                let ok = ty.iter().filter(|t| t.1 != 0.0).all(|&(iy, _)| {
                    tx.iter()
                        .filter(|t| t.1 != 0.0)
                        .all(|&(ix, _)| mask[(plane * h + iy) * w + ix])
                });
                out.push(ok);
            }
        }
    }
    Ok(out)
}

struct CorrelationBackward {
    max_disp: usize,
}

impl GradFn for CorrelationBackward {
    fn name(&self) -> &'static str {
        "correlation1d"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (left, right) = (&parents[0], &parents[1]);
        let [n, c, h, w] = left.shape();
        let l = left.data();
        let r = right.data();
        let norm = 1.0 / c as f64;
        let planes = self.max_disp + 1;
        let mut gl = left.requires_grad().then(|| vec![0.0; left.numel()]);
        let mut gr = right.requires_grad().then(|| vec![0.0; right.numel()]);
        for b in 0..n {
            for k in 0..planes {
                for y in 0..h {
                    let grow = &grad[((b * planes + k) * h + y) * w..][..w];
                    for ch in 0..c {
                        let row = ((b * c + ch) * h + y) * w;
                        for x in k..w {
                            let g = grow[x] * norm;
                            if let Some(gl) = gl.as_mut() {
                                gl[row + x] += g * r[row + x - k];
                            }
                            if let Some(gr) = gr.as_mut() {
                                gr[row + x - k] += g * l[row + x];
                            }
                        }
                    }
                }
            }
        }
        vec![gl, gr]
    }
}

/// `out[k](x, y) = mean_c left_c(x, y) · right_c(x − k, y)` for
/// `0 ≤ k ≤ max_disp`; positions with `x − k < 0` score zero.
pub fn correlation1d(left: &Tensor, right: &Tensor, max_disp: usize) -> Result<CostVolume> {
    check_same_shape(left, right, "correlation1d")?;
    let [n, c, h, w] = left.shape();
    if max_disp >= w {
        return Err(Error::usage(format!(
            "correlation1d: max displacement {max_disp} must be below the width {w}"
        )));
    }
    let planes = max_disp + 1;
    let norm = 1.0 / c as f64;
    let mut out = vec![0.0; n * planes * h * w];
    {
        let l = left.data();
        let r = right.data();
        for b in 0..n {
            for k in 0..planes {
                for y in 0..h {
                    let orow = &mut out[((b * planes + k) * h + y) * w..][..w];
                    for ch in 0..c {
                        let row = ((b * c + ch) * h + y) * w;
                        let (lr, rr) = (&l[row..row + w], &r[row..row + w]);
                        for x in k..w {
                            orow[x] += lr[x] * rr[x - k];
                        }
                    }
                    orow.iter_mut().for_each(|v| *v *= norm);
                }
            }
        }
    }
    Ok(CostVolume {
        data: Tensor::from_op(
            [n, planes, h, w],
            out,
            vec![left.clone(), right.clone()],
            CorrelationBackward { max_disp },
        ),
        max_displacement: max_disp,
    })
}

struct MaskedL1Backward {
    mask: Option<Vec<bool>>,
    count: usize,
}

impl GradFn for MaskedL1Backward {
    fn name(&self) -> &'static str {
        "masked_l1"
    }

    fn backward(&self, _: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (pred, gt) = (&parents[0], &parents[1]);
        let p = pred.data();
        let t = gt.data();
        let scale = if self.count == 0 {
            0.0
        } else {
            grad[0] / self.count as f64
        };
        let g: Vec<f64> = (0..p.len())
            .map(|i| {
                if self.mask.as_ref().is_none_or(|m| m[i]) {
                    scale * crate::tensor::ops::sign(p[i] - t[i])
                } else {
                    0.0
                }
            })
            .collect();
        vec![
            pred.requires_grad().then(|| g.clone()),
            gt.requires_grad().then(|| g.iter().map(|v| -v).collect()),
        ]
    }
}

/// Mean `|pred − gt|` over valid pixels; zero (with zero gradient) when no
/// pixel is valid. `mask` overrides the maps' own masks when given,
/// otherwise the ground truth's mask is used.
pub fn masked_l1(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<Tensor> {
    if pred.scale != gt.scale {
        return Err(Error::usage(format!(
            "masked_l1: prediction at scale {} compared with ground truth at scale {}",
            pred.scale, gt.scale
        )));
    }
    check_same_shape(&pred.data, &gt.data, "masked_l1")?;
    let mask: Option<Vec<bool>> = match mask {
        Some(m) => {
            if m.len() != pred.data.numel() {
                return Err(Error::dim("masked_l1: mask length does not match"));
            }
            Some(m.to_vec())
        }
        None => gt.valid_mask.clone(),
    };
    let (total, count) = {
        let p = pred.data.data();
        let t = gt.data.data();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..p.len() {
            if mask.as_ref().is_none_or(|m| m[i]) {
                total += (p[i] - t[i]).abs();
                count += 1;
            }
        }
        (total, count)
    };
    let value = if count == 0 { 0.0 } else { total / count as f64 };
    Ok(Tensor::from_op(
        [1, 1, 1, 1],
        vec![value],
        vec![pred.data.clone(), gt.data.clone()],
        MaskedL1Backward { mask, count },
    ))
}
