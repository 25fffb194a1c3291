//! Multiscale supervision, the optimiser, dataset screening and splitting,
//! and the loop that runs one schedule phase.

pub mod config;
pub mod schedule;

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::StereoSample;
use crate::error::{Error, Result};
use crate::metrics::{error_sums, ErrorSums, ThreePixelMode};
use crate::nn::{CrlModel, MultiscalePrediction, Stage, ValueScale};
use crate::stereo::{bilinear_downsample, downsample_mask, masked_l1, DisparityMap};
use crate::tensor::{add, scale, Tensor};

pub use config::TrainConfig;
pub use schedule::{parse_schedule, render_schedule, SchedulePhase, DEFAULT_STEPS};

/// Per-scale weights (index = scale) and how ground truth is shrunk.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub weights: Vec<f64>,
    pub value_scale: ValueScale,
}

impl LossConfig {
    pub fn uniform(scales: usize) -> LossConfig {
        LossConfig {
            weights: vec![1.0; scales],
            value_scale: ValueScale::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::usage("loss weights must be finite and non-negative"));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::usage("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Ground truth and validity mask shrunk to scale `s`. Invalid pixels are
/// zeroed first; a coarse pixel is valid only if every pixel feeding it is.
pub fn downsample_ground_truth(
    gt: &DisparityMap,
    mask: Option<&[bool]>,
    s: u32,
    value_scale: ValueScale,
) -> Result<DisparityMap> {
    let f = 1usize << s;
    let full_mask: Vec<bool> = match mask {
        Some(m) => m.to_vec(),
        None => (0..gt.data.numel()).map(|i| gt.is_valid(i)).collect(),
    };
    let clean = Tensor::new(
        gt.shape(),
        gt.data
            .data()
            .iter()
            .zip(&full_mask)
            .map(|(v, ok)| if *ok { *v } else { 0.0 })
            .collect(),
    )?;
    let data = bilinear_downsample(&clean, f, value_scale.shrink(f))?;
    let m = downsample_mask(&full_mask, gt.shape(), f)?;
    DisparityMap::new(data, s)?.with_mask(m)
}

/// `Σ_s weight_s · masked_l1(pred_s, gt_s)` together with the unweighted
/// per-scale terms (NaN for scales with zero weight).
pub fn multiscale_loss(
    preds: &MultiscalePrediction,
    gt: &DisparityMap,
    mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    let mut total: Option<Tensor> = None;
    let mut terms = Vec::with_capacity(preds.len());
    for pred in &preds.maps {
        let w = cfg.weights.get(pred.scale as usize).copied().unwrap_or(0.0);
        if w == 0.0 {
            terms.push(f64::NAN);
            continue;
        }
        let target = downsample_ground_truth(gt, mask, pred.scale, cfg.value_scale)?;
        let term = masked_l1(pred, &target, None)?;
        terms.push(term.item());
        let weighted = scale(&term, w);
        total = Some(match total {
            None => weighted,
            Some(t) => add(&t, &weighted)?,
        });
    }
    let total = total.ok_or_else(|| Error::usage("no supervised scale has a positive weight"))?;
    Ok((total, terms))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a single value; `t` is the 1-based step count of that
/// parameter. Returns the new `(param, m, v)`.
pub fn adam_update(p: f64, g: f64, m: f64, v: f64, t: u64, cfg: &AdamConfig) -> (f64, f64, f64) {
    let m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    let v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
    (p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps), m, v)
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Optimiser state keyed by parameter name.
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    /// Updates every parameter that requires a gradient. If any gradient is
    /// non-finite nothing changes, a warning is logged and `false` returned.
    pub fn step(&mut self, params: &[(String, &Tensor)]) -> bool {
        let live: Vec<(&String, &Tensor, Vec<f64>)> = params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n, *t, t.grad()))
            .collect();
        if live.iter().any(|(_, _, g)| g.iter().any(|v| !v.is_finite())) {
            log::warn!("non-finite gradient; optimiser step skipped");
            return false;
        }
        for (name, t, g) in live {
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let cfg = self.config;
            t.update_data(|p| {
                for i in 0..p.len() {
                    let (np, nm, nv) = adam_update(p[i], g[i], st.m[i], st.v[i], st.t, &cfg);
                    p[i] = np;
                    st.m[i] = nm;
                    st.v[i] = nv;
                }
            });
        }
        true
    }
}

/// `true` to keep a sample: reject only when strictly more than
/// `max_fraction` of its valid values exceed `threshold`.
pub fn screen_sample(gt: &DisparityMap, threshold: f64, max_fraction: f64) -> bool {
    let d = gt.data.data();
    let (mut over, mut total) = (0usize, 0usize);
    for (i, v) in d.iter().enumerate() {
        if gt.is_valid(i) {
            total += 1;
            over += (*v > threshold) as usize;
        }
    }
    total == 0 || (over as f64) <= max_fraction * total as f64
}

pub const SCREEN_THRESHOLD: f64 = 300.0;
pub const SCREEN_FRACTION: f64 = 0.25;

/// Seeded shuffle into `(train, validation)` with `round(train_frac · N)`
/// training items; each split keeps the input order.
pub fn split_dataset<T: Clone>(items: &[T], train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::usage("splitting needs at least two samples"));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::usage(format!("train fraction {train_frac} outside [0, 1]")));
    }
    let n = items.len();
    let n_train = (train_frac * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &idx[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, item) in items.iter().enumerate() {
        if in_train[i] {
            train.push(item.clone());
        } else {
            val.push(item.clone());
        }
    }
    Ok((train, val))
}

/// Stacks samples along the batch axis; the mask is `None` if every pixel
/// is valid.
pub fn stack_batch(samples: &[&StereoSample]) -> Result<(Tensor, Tensor, DisparityMap)> {
    let first = samples.first().ok_or_else(|| Error::usage("empty batch"))?;
    let [_, c, h, w] = first.left.shape();
    let n = samples.len();
    let (mut l, mut r, mut d, mut m) = (
        Vec::with_capacity(n * c * h * w),
        Vec::with_capacity(n * c * h * w),
        Vec::with_capacity(n * h * w),
        Vec::with_capacity(n * h * w),
    );
    for s in samples {
        s.check()?;
        if s.left.shape() != first.left.shape() {
            return Err(Error::dim(format!(
                "batch mixes sizes {:?} and {:?}",
                first.left.shape(),
                s.left.shape()
            )));
        }
        l.extend_from_slice(&s.left.data());
        r.extend_from_slice(&s.right.data());
        d.extend_from_slice(&s.gt.data.data());
        m.extend((0..h * w).map(|i| s.gt.is_valid(i)));
    }
    let gt = DisparityMap::new(Tensor::new([n, 1, h, w], d)?, 0)?;
    let gt = if m.iter().all(|v| *v) { gt } else { gt.with_mask(m)? };
    Ok((Tensor::new([n, c, h, w], l)?, Tensor::new([n, c, h, w], r)?, gt))
}

/// Training data by schedule tag.
pub type DatasetRegistry = HashMap<char, Vec<StereoSample>>;

#[derive(Debug, Clone)]
pub struct PhaseConfig {
    pub batch: usize,
    pub adam: AdamConfig,
    /// Weights for the first stage's seven outputs.
    pub loss1: LossConfig,
    /// Weights for the second stage's five outputs.
    pub loss2: LossConfig,
    pub seed: u64,
    /// Consecutive non-finite losses tolerated before giving up.
    pub nan_patience: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            batch: 4,
            adam: AdamConfig::default(),
            loss1: LossConfig::uniform(7),
            loss2: LossConfig::uniform(5),
            seed: 0,
            nan_patience: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based within the phase.
    pub step: usize,
    pub phase_index: usize,
    pub phase: String,
    pub loss: f64,
    /// Unweighted per-scale terms, finest first.
    pub scale_losses: Vec<f64>,
    pub applied: bool,
}

pub const LOG_HEADER: &str = "phase_index,phase,step,loss,l0,l1,l2,l3,l4,l5,l6,applied";

/// CSV training log, one row per step.
pub struct TrainLog<W: Write> {
    out: W,
}

impl<W: Write> TrainLog<W> {
    pub fn new(mut out: W) -> std::io::Result<TrainLog<W>> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(TrainLog { out })
    }

    pub fn write(&mut self, r: &StepRecord) -> std::io::Result<()> {
        let mut cols: Vec<String> = r
            .scale_losses
            .iter()
            .map(|v| if v.is_nan() { String::new() } else { v.to_string() })
            .collect();
        cols.resize(7, String::new());
        writeln!(
            self.out,
            "{},{},{},{},{},{}",
            r.phase_index,
            r.phase,
            r.step,
            r.loss,
            cols.join(","),
            r.applied as u8
        )
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub phase: SchedulePhase,
    pub steps: usize,
    pub skipped_steps: usize,
    pub mean_final_loss: f64,
    pub checksums_before: (String, String),
    pub checksums_after: (String, String),
    pub seconds: f64,
}

/// Trains the parameters `phase.stage` selects on the phase's dataset. A
/// first-stage phase supervises `d1`; the others supervise `d2`. Frozen
/// parameters are verified unchanged at the end.
pub fn run_phase(
    model: &CrlModel,
    phase: &SchedulePhase,
    phase_index: usize,
    data: &DatasetRegistry,
    cfg: &PhaseConfig,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<PhaseReport> {
    let samples = data
        .get(&phase.dataset)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("phase {phase}: no training data for tag {}", phase.dataset)))?;
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let started = Instant::now();
    let before = (model.stage1.checksum(), model.stage2.checksum());
    model.set_trainable(phase.stage);
    model.zero_grad();
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((phase_index as u64 + 1) << 32));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let (mut skipped, mut bad_run) = (0, 0);
    let mut recent = Vec::new();
    let params: Vec<(String, &Tensor)> = model
        .stage1
        .params()
        .iter()
        .map(|(n, t)| (format!("1/{n}"), t))
        .chain(model.stage2.params().iter().map(|(n, t)| (format!("2/{n}"), t)))
        .collect();

    for step in 1..=phase.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let (left, right, gt) = stack_batch(&batch)?;
        let (loss, terms) = match phase.stage {
            Stage::First => {
                let d1 = model.forward_stage1(&left, &right)?;
                multiscale_loss(&d1, &gt, None, &cfg.loss1)?
            }
            Stage::Second | Stage::Both => {
                let out = model.forward(&left, &right)?;
                multiscale_loss(&out.d2, &gt, None, &cfg.loss2)?
            }
        };
        let value = loss.item();
        let applied = if value.is_finite() {
            bad_run = 0;
            loss.backward()?;
            let ok = adam.step(&params);
            model.zero_grad();
            ok
        } else {
            bad_run += 1;
            log::warn!("phase {phase} step {step}: non-finite loss {value}");
            false
        };
        if !applied {
            skipped += 1;
        }
        log(&StepRecord {
            step,
            phase_index,
            phase: phase.to_string(),
            loss: value,
            scale_losses: terms,
            applied,
        })?;
        if bad_run >= cfg.nan_patience {
            return Err(Error::Diverged(format!(
                "phase {phase}: {bad_run} consecutive non-finite losses ending at step {step}"
            )));
        }
        recent.push(value);
        if recent.len() > 50 {
            recent.remove(0);
        }
    }

    let after = (model.stage1.checksum(), model.stage2.checksum());
    if phase.stage == Stage::Second && after.0 != before.0 {
        return Err(Error::Verification(format!("phase {phase} changed the frozen first stage")));
    }
    if phase.stage == Stage::First && after.1 != before.1 {
        return Err(Error::Verification(format!("phase {phase} changed the frozen second stage")));
    }
    Ok(PhaseReport {
        phase: phase.clone(),
        steps: phase.steps,
        skipped_steps: skipped,
        mean_final_loss: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
        checksums_before: before,
        checksums_after: after,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Pixel-weighted error of both stages' full-resolution outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Validation {
    pub stage1: ErrorSums,
    pub stage2: ErrorSums,
}

/// Evaluates `d1` and `d2` on `samples` with every parameter frozen; the
/// previous trainable flags are restored afterwards.
pub fn validate(model: &CrlModel, samples: &[StereoSample], batch: usize, mode: ThreePixelMode) -> Result<Validation> {
    let flags: Vec<bool> = model
        .stage1
        .params()
        .iter()
        .chain(model.stage2.params())
        .map(|(_, t)| t.requires_grad())
        .collect();
    model.stage1.set_trainable(false);
    model.stage2.set_trainable(false);
    let result = (|| {
        let mut v = Validation::default();
        for chunk in samples.chunks(batch.max(1)) {
            let refs: Vec<&StereoSample> = chunk.iter().collect();
            let (left, right, gt) = stack_batch(&refs)?;
            let out = model.forward(&left, &right)?;
            v.stage1.merge(&error_sums(out.d1.finest(), &gt, None, mode)?);
            v.stage2.merge(&error_sums(out.d2.finest(), &gt, None, mode)?);
        }
        Ok(v)
    })();
    for ((_, t), on) in model.stage1.params().iter().chain(model.stage2.params()).zip(flags) {
        t.set_requires_grad(on);
    }
    result
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::nn::CrlConfig;
    use crate::synth::DeskPreset;

    fn rand_map(shape: crate::Shape, seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn pyramid(gt: &DisparityMap, cfg: &LossConfig, scales: u32) -> MultiscalePrediction {
        MultiscalePrediction {
            maps: (0..scales)
                .map(|s| downsample_ground_truth(gt, None, s, cfg.value_scale).unwrap())
                .map(|m| DisparityMap::new(m.data, m.scale).unwrap())
                .collect(),
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = DisparityMap::new(rand_map([1, 1, 16, 16], 1, 0.0, 8.0), 0).unwrap();
        let cfg = LossConfig::uniform(5);
        let (loss, terms) = multiscale_loss(&pyramid(&gt, &cfg, 5), &gt, None, &cfg).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(terms.len(), 5);
    }

    #[test]
    fn loss_matches_per_scale_loop() {
        let gt_t = rand_map([2, 1, 16, 32], 2, 0.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask: Vec<bool> = (0..gt_t.numel()).map(|_| rng.random_bool(0.9)).collect();
        let gt = DisparityMap::new(gt_t, 0).unwrap().with_mask(mask.clone()).unwrap();
        let cfg = LossConfig {
            weights: vec![1.0, 0.5, 0.0, 2.0],
            value_scale: ValueScale::PixelsAtScale,
        };
        let preds = MultiscalePrediction {
            maps: (0..4)
                .map(|s| {
                    DisparityMap::new(rand_map([2, 1, 16 >> s, 32 >> s], 10 + s as u64, 0.0, 10.0), s)
                        .unwrap()
                })
                .collect(),
        };
        let (loss, _) = multiscale_loss(&preds, &gt, None, &cfg).unwrap();

        // Oracle: explicit strict-mask footprint and weighted masked means.
        let mut expect = 0.0;
        for s in 0..4u32 {
            let w = cfg.weights[s as usize];
            if w == 0.0 {
                continue;
            }
            let f = 1usize << s;
            let target = downsample_ground_truth(&gt, None, s, cfg.value_scale).unwrap();
            let p = preds.maps[s as usize].data.data();
            let t = target.data.data();
            let (mut sum, mut n) = (0.0, 0);
            let (oh, ow) = (16 / f, 32 / f);
            for b in 0..2 {
                for y in 0..oh {
                    for x in 0..ow {
                        let footprint_ok = if f == 1 {
                            mask[(b * 16 + y) * 32 + x]
                        } else {
                            let (y0, x0) = (y * f + f / 2 - 1, x * f + f / 2 - 1);
                            [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
                                .iter()
                                .all(|&(yy, xx)| mask[(b * 16 + yy) * 32 + xx])
                        };
                        if footprint_ok {
                            let i = (b * oh + y) * ow + x;
                            sum += (p[i] - t[i]).abs();
                            n += 1;
                        }
                    }
                }
            }
            expect += w * sum / n as f64;
        }
        assert!((loss.item() - expect).abs() < 1e-12, "{} vs {expect}", loss.item());
    }

    #[test]
    fn invalid_ground_truth_is_ignored() {
        let t = rand_map([1, 1, 16, 16], 4, 0.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask: Vec<bool> = (0..256).map(|_| rng.random_bool(0.8)).collect();
        let gt = DisparityMap::new(t.clone(), 0).unwrap().with_mask(mask.clone()).unwrap();
        let mut perturbed = t.to_vec();
        for (v, ok) in perturbed.iter_mut().zip(&mask) {
            if !ok {
                *v += 1000.0;
            }
        }
        let gt2 = DisparityMap::new(Tensor::new([1, 1, 16, 16], perturbed).unwrap(), 0)
            .unwrap()
            .with_mask(mask)
            .unwrap();
        let cfg = LossConfig::uniform(3);
        let preds = MultiscalePrediction {
            maps: (0..3)
                .map(|s| DisparityMap::new(rand_map([1, 1, 16 >> s, 16 >> s], 20 + s as u64, 0.0, 9.0), s).unwrap())
                .collect(),
        };
        let a = multiscale_loss(&preds, &gt, None, &cfg).unwrap().0.item();
        let b = multiscale_loss(&preds, &gt2, None, &cfg).unwrap().0.item();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_needs_a_positive_weight() {
        let gt = DisparityMap::new(Tensor::zeros([1, 1, 4, 4]), 0).unwrap();
        let cfg = LossConfig {
            weights: vec![0.0, 0.0],
            value_scale: ValueScale::Keep,
        };
        let preds = MultiscalePrediction { maps: vec![gt.clone()] };
        assert!(matches!(multiscale_loss(&preds, &gt, None, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn adam_scalar_formula() {
        let cfg = AdamConfig::default();
        let (p, m, v) = adam_update(0.5, 0.2, 0.0, 0.0, 1, &cfg);
        let m1 = 0.1 * 0.2;
        let v1 = 0.001 * 0.04;
        let expect = 0.5 - 1e-4 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        assert!((p - expect).abs() < 1e-12);
        assert!((m - m1).abs() < 1e-15 && (v - v1).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_skips_nan() {
        let t = Tensor::param([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        sum0(&t).backward().unwrap();
        assert!(opt.step(&[("x".into(), &t)]));
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0]);
        let bad = Tensor::param([1, 1, 1, 1], vec![1.0]).unwrap();
        crate::tensor::scale(&bad, f64::NAN).backward().unwrap();
        assert!(!opt.step(&[("x".into(), &t), ("y".into(), &bad)]));
        assert_eq!(bad.to_vec(), vec![1.0]);
    }

    fn sum0(t: &Tensor) -> Tensor {
        crate::tensor::scale(&crate::tensor::sum(t), 0.0)
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let x = Tensor::param([1, 1, 1, 2], vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        let mut values = Vec::new();
        for _ in 0..200 {
            x.zero_grad();
            let f = crate::tensor::sum(&crate::tensor::mul(&x, &x).unwrap());
            values.push(f.item());
            f.backward().unwrap();
            opt.step(&[("x".into(), &x)]);
        }
        for w in values[10..].windows(2) {
            assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
        }
        assert!(values[199] < 0.25 * values[0], "{} -> {}", values[0], values[199]);
    }

    #[test]
    fn screening_rule_is_strict() {
        let map = |over: usize| {
            let v: Vec<f64> = (0..100).map(|i| if i < over { 400.0 } else { 5.0 }).collect();
            DisparityMap::new(Tensor::new([1, 1, 10, 10], v).unwrap(), 0).unwrap()
        };
        assert!(!screen_sample(&map(30), SCREEN_THRESHOLD, SCREEN_FRACTION));
        assert!(screen_sample(&map(25), SCREEN_THRESHOLD, SCREEN_FRACTION));
        assert!(screen_sample(&map(0), SCREEN_THRESHOLD, SCREEN_FRACTION));
        let exactly_300: Vec<f64> = vec![300.0; 100];
        let m = DisparityMap::new(Tensor::new([1, 1, 10, 10], exactly_300).unwrap(), 0).unwrap();
        assert!(screen_sample(&m, SCREEN_THRESHOLD, SCREEN_FRACTION));
    }

    #[test]
    fn split_sizes_and_identity() {
        let items: Vec<usize> = (0..200).collect();
        let (a, b) = split_dataset(&items, 0.85, 7).unwrap();
        assert_eq!((a.len(), b.len()), (170, 30));
        let (a2, b2) = split_dataset(&items, 0.85, 7).unwrap();
        assert_eq!((&a, &b), (&a2, &b2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert!(a.iter().all(|x| !b.contains(x)));
        assert_ne!(split_dataset(&items, 0.85, 8).unwrap().1, b);
        assert!(split_dataset(&[1], 0.85, 0).is_err());
    }

    fn tiny_setup() -> (CrlModel, DatasetRegistry) {
        let model = CrlModel::new(CrlConfig {
            width1: 0.125,
            width2: 0.125,
            max_disp: 4,
            ..CrlConfig::default()
        })
        .unwrap();
        let mut data = DatasetRegistry::new();
        data.insert('F', DeskPreset::by_name("tiny").unwrap().generate(4, 1).unwrap());
        (model, data)
    }

    #[test]
    fn second_stage_phase_keeps_first_stage_bytes() {
        let (model, data) = tiny_setup();
        let phase = SchedulePhase { stage: Stage::Second, dataset: 'F', steps: 100 };
        let cfg = PhaseConfig { batch: 2, ..PhaseConfig::default() };
        let mut rows = Vec::new();
        let rep = run_phase(&model, &phase, 1, &data, &cfg, &mut |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(rep.checksums_before.0, rep.checksums_after.0);
        assert_ne!(rep.checksums_before.1, rep.checksums_after.1);
        assert_eq!(rows.len(), 100);
        assert!(rows.iter().all(|r| r.loss.is_finite() && r.scale_losses.len() == 5));
    }

    #[test]
    fn whole_network_phase_changes_both_stages() {
        let (model, data) = tiny_setup();
        let phase = SchedulePhase { stage: Stage::Both, dataset: 'F', steps: 2 };
        let cfg = PhaseConfig { batch: 2, ..PhaseConfig::default() };
        let rep = run_phase(&model, &phase, 0, &data, &cfg, &mut |_| Ok(())).unwrap();
        assert_ne!(rep.checksums_before.0, rep.checksums_after.0);
        assert_ne!(rep.checksums_before.1, rep.checksums_after.1);
    }

    #[test]
    fn missing_dataset_is_a_configuration_error() {
        let (model, data) = tiny_setup();
        let phase = SchedulePhase { stage: Stage::First, dataset: 'K', steps: 1 };
        assert!(matches!(
            run_phase(&model, &phase, 0, &data, &PhaseConfig::default(), &mut |_| Ok(())),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let (model, data) = tiny_setup();
            let phase = SchedulePhase { stage: Stage::First, dataset: 'F', steps: 3 };
            let cfg = PhaseConfig { batch: 2, ..PhaseConfig::default() };
            let mut losses = Vec::new();
            run_phase(&model, &phase, 0, &data, &cfg, &mut |r| {
                losses.push(r.loss);
                Ok(())
            })
            .unwrap();
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_rows_have_fixed_columns() {
        let mut buf = Vec::new();
        {
            let mut log = TrainLog::new(&mut buf).unwrap();
            log.write(&StepRecord {
                step: 1,
                phase_index: 0,
                phase: "1F".into(),
                loss: 2.5,
                scale_losses: vec![1.0, f64::NAN, 0.5],
                applied: true,
            })
            .unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines[1], "0,1F,1,2.5,1,,0.5,,,,,1");
        assert_eq!(lines[1].split(',').count(), LOG_HEADER.split(',').count());
    }
}
