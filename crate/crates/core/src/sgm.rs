//! Semi-global matching on a windowed SAD cost.

use crate::dataset::StereoSample;
use crate::error::{Error, Result};
use crate::stereo::{CostVolume, DisparityMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SgmParams {
    pub max_disp: usize,
    pub p1: f64,
    pub p2: f64,
    /// 4 or 8 path directions.
    pub directions: usize,
    pub subpixel: bool,
    /// A pixel is kept only if its best cost is below `ratio` times the best
    /// cost more than one step away; `None` disables the test.
    pub uniqueness: Option<f64>,
    pub left_right_check: bool,
    /// Side of the square SAD window.
    pub window: usize,
}

impl Default for SgmParams {
    fn default() -> Self {
        SgmParams {
            max_disp: 64,
            p1: 10.0,
            p2: 120.0,
            directions: 8,
            subpixel: true,
            uniqueness: Some(0.95),
            left_right_check: false,
            window: 5,
        }
    }
}

impl SgmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p2 > self.p1 && self.p1 > 0.0) {
            return Err(Error::usage(format!(
                "SGM penalties need P2 > P1 > 0, got P1={} P2={}",
                self.p1, self.p2
            )));
        }
        if self.max_disp < 1 {
            return Err(Error::usage("SGM needs a disparity range of at least 1"));
        }
        if self.directions != 4 && self.directions != 8 {
            return Err(Error::usage(format!("SGM runs 4 or 8 paths, not {}", self.directions)));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::usage("SAD window side must be odd"));
        }
        Ok(())
    }
}

/// Luma of the first batch item on a 0..255 scale.
pub fn grayscale(image: &Tensor) -> Result<Vec<f64>> {
    let [_, c, h, w] = image.shape();
    let d = image.data();
    let plane = h * w;
    Ok(match c {
        1 => d[..plane].iter().map(|v| v * 255.0).collect(),
        3 => (0..plane)
            .map(|i| 255.0 * (0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]))
            .collect(),
        _ => return Err(Error::dim(format!("grayscale needs 1 or 3 channels, got {c}"))),
    })
}

/// Cost at displacements whose centre pixel has no partner in the right
/// image: the largest possible window sum.
pub fn out_of_range_cost(window: usize) -> f64 {
    (window * window) as f64 * 255.0
}

/// 5×5 SAD cost volume.
pub fn sad_cost_volume(left: &Tensor, right: &Tensor, max_disp: usize) -> Result<CostVolume> {
    sad_cost_volume_window(left, right, max_disp, 5)
}

/// SAD over a `window × window` neighbourhood on grayscale images. Rows are
/// clamped at the border. Columns whose left or right sample falls outside
/// the image are dropped and the sum is rescaled to the full window.
pub fn sad_cost_volume_window(
    left: &Tensor,
    right: &Tensor,
    max_disp: usize,
    window: usize,
) -> Result<CostVolume> {
    crate::tensor::check_same_shape(left, right, "sad_cost_volume")?;
    let [n, _, h, w] = left.shape();
    if n != 1 {
        return Err(Error::usage("cost volumes are built one image pair at a time"));
    }
    if max_disp >= w {
        return Err(Error::usage(format!("disparity range {max_disp} must be below width {w}")));
    }
    let (gl, gr) = (grayscale(left)?, grayscale(right)?);
    let r = (window / 2) as i64;
    let full = (window * window) as f64;
    let planes = max_disp + 1;
    let mut cost = vec![0.0; planes * h * w];
    // Per-column absolute differences summed over the window rows, reused
    // across the horizontal window.
    let mut column = vec![0.0; w];
    for k in 0..planes {
        for y in 0..h {
            for (x, col) in column.iter_mut().enumerate() {
                *col = if x >= k {
                    (-r..=r)
                        .map(|dy| {
                            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            (gl[yy * w + x] - gr[yy * w + x - k]).abs()
                        })
                        .sum()
                } else {
                    0.0
                };
            }
            for x in 0..w {
                let out = &mut cost[(k * h + y) * w + x];
                if x < k {
                    *out = out_of_range_cost(window);
                    continue;
                }
                let lo = (x as i64 - r).max(k as i64) as usize;
                let hi = (x as i64 + r).min(w as i64 - 1) as usize;
                let used = (hi - lo + 1) as f64 * window as f64;
                let total: f64 = column[lo..=hi].iter().sum();
                *out = total * full / used;
            }
        }
    }
    Ok(CostVolume {
        data: Tensor::new([1, planes, h, w], cost)?,
        max_displacement: max_disp,
    })
}

const DIRECTIONS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

/// Path cost along one direction `(dx, dy)`: each pixel's cost plus the
/// cheapest way to continue from its predecessor `p − r`, minus the
/// predecessor's minimum. Laid out like the cost volume.
pub fn aggregate_direction(cost: &CostVolume, dir: (i64, i64), p1: f64, p2: f64) -> Vec<f64> {
    let [_, planes, h, w] = cost.data.shape();
    let c = cost.data.data();
    let plane = h * w;
    let mut l = vec![0.0; c.len()];
    let ys: Vec<usize> = if dir.1 >= 0 { (0..h).collect() } else { (0..h).rev().collect() };
    let xs: Vec<usize> = if dir.0 >= 0 { (0..w).collect() } else { (0..w).rev().collect() };
    let mut prev = vec![0.0; planes];
    for &y in &ys {
        for &x in &xs {
            let px = x as i64 - dir.0;
            let py = y as i64 - dir.1;
            let p = y * w + x;
            if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                for k in 0..planes {
                    l[k * plane + p] = c[k * plane + p];
                }
                continue;
            }
            let q = py as usize * w + px as usize;
            for (k, v) in prev.iter_mut().enumerate() {
                *v = l[k * plane + q];
            }
            let min_prev = prev.iter().copied().fold(f64::INFINITY, f64::min);
            for k in 0..planes {
                let mut best = prev[k];
                if k > 0 {
                    best = best.min(prev[k - 1] + p1);
                }
                if k + 1 < planes {
                    best = best.min(prev[k + 1] + p1);
                }
                best = best.min(min_prev + p2);
                l[k * plane + p] = c[k * plane + p] + best - min_prev;
            }
        }
    }
    l
}

/// Sum of path costs over the configured directions, in a fixed order.
pub fn sgm_aggregate(cost: &CostVolume, params: &SgmParams) -> Result<CostVolume> {
    params.validate()?;
    let mut total = vec![0.0; cost.data.numel()];
    for &dir in &DIRECTIONS[..params.directions] {
        for (t, v) in total.iter_mut().zip(aggregate_direction(cost, dir, params.p1, params.p2)) {
            *t += v;
        }
    }
    Ok(CostVolume {
        data: Tensor::new(cost.data.shape(), total)?,
        max_displacement: cost.max_displacement,
    })
}

/// Offset of the vertex of the parabola through `(−1, c0), (0, c1), (1, c2)`,
/// limited to (−0.5, 0.5); zero when the costs do not curve upwards.
pub fn parabola_offset(c0: f64, c1: f64, c2: f64) -> f64 {
    let denom = c0 + c2 - 2.0 * c1;
    if denom <= 0.0 {
        return 0.0;
    }
    ((c0 - c2) / (2.0 * denom)).clamp(-0.499_999, 0.499_999)
}

/// Per-pixel displacement of least cost (the smaller one on ties), with an
/// optional parabolic refinement.
pub fn wta_disparity(cost: &CostVolume, subpixel: bool) -> Result<DisparityMap> {
    let [_, planes, h, w] = cost.data.shape();
    let c = cost.data.data();
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (p, o) in out.iter_mut().enumerate() {
        let mut best = 0;
        for k in 1..planes {
            if c[k * plane + p] < c[best * plane + p] {
                best = k;
            }
        }
        let mut d = best as f64;
        if subpixel && best > 0 && best + 1 < planes {
            d += parabola_offset(
                c[(best - 1) * plane + p],
                c[best * plane + p],
                c[(best + 1) * plane + p],
            );
        }
        *o = d;
    }
    DisparityMap::new(Tensor::new([1, 1, h, w], out)?, 0)
}

/// Cost → aggregation → winner-take-all, then invalidation of ambiguous
/// pixels (uniqueness test, and the left-right check when enabled).
pub fn run_sgm(sample: &StereoSample, params: &SgmParams) -> Result<DisparityMap> {
    params.validate()?;
    sample.check()?;
    let raw = sad_cost_volume_window(&sample.left, &sample.right, params.max_disp, params.window)?;
    let agg = sgm_aggregate(&raw, params)?;
    let disp = wta_disparity(&agg, params.subpixel)?;
    let [_, planes, h, w] = agg.data.shape();
    let c = agg.data.data();
    let plane = h * w;
    let d = disp.data.data().clone();
    let mut mask = vec![true; plane];
    if let Some(ratio) = params.uniqueness {
        for (p, valid) in mask.iter_mut().enumerate() {
            let k = d[p].round() as usize;
            let best = c[k * plane + p];
            let second = (0..planes)
                .filter(|&j| j + 1 < k || j > k + 1)
                .map(|j| c[j * plane + p])
                .fold(f64::INFINITY, f64::min);
            if second.is_finite() && best >= ratio * second {
                *valid = false;
            }
        }
    }
    if params.left_right_check {
        // Right-view disparity read from the same volume: C_R(x, k) = C_L(x + k, k).
        for y in 0..h {
            let right: Vec<usize> = (0..w)
                .map(|xr| {
                    let mut best = 0;
                    for k in 1..planes.min(w - xr) {
                        if c[k * plane + y * w + xr + k] < c[best * plane + y * w + xr + best] {
                            best = k;
                        }
                    }
                    best
                })
                .collect();
            for x in 0..w {
                let dl = d[y * w + x];
                let xr = x as f64 - dl;
                if xr < 0.0 || (right[xr.round() as usize] as f64 - dl).abs() > 1.0 {
                    mask[y * w + x] = false;
                }
            }
        }
    }
    drop(c);
    disp.with_mask(mask)
}
