//! Endpoint error, three-pixel error, depth conversion and reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::stereo::DisparityMap;
use crate::tensor::check_same_shape;

/// Which pixels count as bad in the three-pixel error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThreePixelMode {
    /// Error strictly above 3 px.
    #[default]
    Plain,
    /// Error above 3 px and above 5 % of the true disparity.
    Kitti,
}

impl ThreePixelMode {
    pub fn parse(s: &str) -> Option<ThreePixelMode> {
        match s {
            "plain" => Some(ThreePixelMode::Plain),
            "kitti" => Some(ThreePixelMode::Kitti),
            _ => None,
        }
    }

    pub fn is_bad(self, err: f64, gt: f64) -> bool {
        match self {
            ThreePixelMode::Plain => err > 3.0,
            ThreePixelMode::Kitti => err > 3.0 && err > 0.05 * gt.abs(),
        }
    }
}

/// Sums over the valid pixels of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorSums {
    pub abs_error: f64,
    pub bad: usize,
    pub valid: usize,
}

impl ErrorSums {
    pub fn epe(&self) -> Option<f64> {
        (self.valid > 0).then(|| self.abs_error / self.valid as f64)
    }

    pub fn three_pixel(&self) -> Option<f64> {
        (self.valid > 0).then(|| 100.0 * self.bad as f64 / self.valid as f64)
    }

    pub fn merge(&mut self, other: &ErrorSums) {
        self.abs_error += other.abs_error;
        self.bad += other.bad;
        self.valid += other.valid;
    }
}

/// Error sums over pixels valid in `mask` (or the ground truth's own mask).
pub fn error_sums(
    pred: &DisparityMap,
    gt: &DisparityMap,
    mask: Option<&[bool]>,
    mode: ThreePixelMode,
) -> Result<ErrorSums> {
    if pred.scale != gt.scale {
        return Err(Error::usage(format!(
            "prediction at scale {} evaluated against ground truth at scale {}",
            pred.scale, gt.scale
        )));
    }
    check_same_shape(&pred.data, &gt.data, "metrics")?;
    if mask.is_some_and(|m| m.len() != gt.data.numel()) {
        return Err(Error::dim("metrics: mask length does not match"));
    }
    let p = pred.data.data();
    let g = gt.data.data();
    let mut sums = ErrorSums::default();
    for i in 0..p.len() {
        let valid = match mask {
            Some(m) => m[i],
            None => gt.is_valid(i),
        };
        if valid {
            let err = (p[i] - g[i]).abs();
            sums.abs_error += err;
            sums.bad += mode.is_bad(err, g[i]) as usize;
            sums.valid += 1;
        }
    }
    Ok(sums)
}

/// Mean absolute disparity error over valid pixels; `None` when there are
/// none.
pub fn epe(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<Option<f64>> {
    Ok(error_sums(pred, gt, mask, ThreePixelMode::Plain)?.epe())
}

/// Percentage of valid pixels whose error counts as bad under `mode`.
pub fn three_pixel_error(
    pred: &DisparityMap,
    gt: &DisparityMap,
    mask: Option<&[bool]>,
    mode: ThreePixelMode,
) -> Result<Option<f64>> {
    Ok(error_sums(pred, gt, mask, mode)?.three_pixel())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraGeometry {
    /// Pixels.
    pub focal_length: f64,
    /// Metres.
    pub baseline: f64,
}

impl CameraGeometry {
    pub fn new(focal_length: f64, baseline: f64) -> Result<CameraGeometry> {
        if !(focal_length > 0.0 && baseline > 0.0) {
            return Err(Error::usage("focal length and baseline must be positive"));
        }
        Ok(CameraGeometry {
            focal_length,
            baseline,
        })
    }
}

pub fn disparity_to_depth(d: f64, cam: &CameraGeometry) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::usage(format!("depth is undefined for disparity {d}")));
    }
    Ok(cam.focal_length * cam.baseline / d)
}

pub fn depth_to_disparity(z: f64, cam: &CameraGeometry) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::usage(format!("disparity is undefined for depth {z}")));
    }
    Ok(cam.focal_length * cam.baseline / z)
}

/// One evaluated prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub method: String,
    pub sample: String,
    pub sums: ErrorSums,
    pub seconds: f64,
}

/// Pixel-weighted totals for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub sums: ErrorSums,
    pub seconds: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SampleEval>,
    /// In order of first appearance.
    pub summaries: Vec<MethodSummary>,
}

pub const CSV_HEADER: &str = "method,sample,epe,3pe,valid_pixels,seconds";
/// Sample column of the aggregate rows.
pub const AGGREGATE_ID: &str = "ALL";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

pub fn make_report(rows: Vec<SampleEval>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::usage("a report needs at least one evaluated sample"));
    }
    let mut summaries: Vec<MethodSummary> = Vec::new();
    for r in &rows {
        if r.method.contains(',') || r.sample.contains(',') {
            return Err(Error::usage("method and sample names may not contain commas"));
        }
        let idx = match summaries.iter().position(|s| s.method == r.method) {
            Some(i) => i,
            None => {
                summaries.push(MethodSummary {
                    method: r.method.clone(),
                    sums: ErrorSums::default(),
                    seconds: 0.0,
                    samples: 0,
                });
                summaries.len() - 1
            }
        };
        let s = &mut summaries[idx];
        s.sums.merge(&r.sums);
        s.seconds += r.seconds;
        s.samples += 1;
    }
    Ok(EvalReport { rows, summaries })
}

impl EvalReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Header, one row per sample, then one `ALL` row per method whose
    /// seconds column is the mean per sample.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                r.sample,
                opt(r.sums.epe()),
                opt(r.sums.three_pixel()),
                r.sums.valid,
                r.seconds
            );
        }
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{AGGREGATE_ID},{},{},{},{}",
                s.method,
                opt(s.sums.epe()),
                opt(s.sums.three_pixel()),
                s.sums.valid,
                s.seconds / s.samples as f64
            );
        }
        out
    }

    /// Fixed-width table of the per-method aggregates.
    pub fn to_table(&self) -> String {
        let width = self
            .summaries
            .iter()
            .map(|s| s.method.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>12}\n",
            "method", "EPE", "3PE(%)", "samples", "valid px"
        );
        let cell = |v: Option<f64>, prec: usize| v.map_or("-".into(), |v| format!("{v:.prec$}"));
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}  {:>8}  {:>12}",
                s.method,
                cell(s.sums.epe(), 3),
                cell(s.sums.three_pixel(), 2),
                s.samples,
                s.sums.valid
            );
        }
        out
    }
}

/// One parsed CSV row: method, sample, EPE, 3PE, valid pixels, seconds.
pub type CsvRow = (String, String, Option<f64>, Option<f64>, usize, f64);

pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse {
            position: 1,
            message: format!("expected header {CSV_HEADER}"),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: &str| Error::Parse {
                position: i + 2,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s == "undefined" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad("bad number"))
                }
            };
            Ok((
                f[0].to_string(),
                f[1].to_string(),
                num(f[2])?,
                num(f[3])?,
                f[4].parse().map_err(|_| bad("bad pixel count"))?,
                f[5].parse().map_err(|_| bad("bad seconds"))?,
            ))
        })
        .collect()
}
