//! The training configuration file: one `key=value` per line, `#` starts a
//! comment.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `schedule` | phase string, e.g. `1F-2F-0F` | required |
//! | `dataset.T` | directory holding the samples for tag `T` | required per tag used |
//! | `format.T` | `pfm` or `png` ground truth for tag `T` | `pfm` |
//! | `steps` | steps for every phase | 10000 |
//! | `steps.N` | steps for phase `N` (1-based) | `steps` |
//! | `batch` | batch size of single-stage phases | 4 |
//! | `batch.0` | batch size of whole-network phases | 2 |
//! | `lr` | Adam learning rate | 1e-4 |
//! | `seed` | model initialisation and batch order | 0 |
//! | `split_seed` | train/validation split | 0 |
//! | `train_frac` | training share of each dataset | 0.85 |
//! | `screen` | drop samples failing the large-disparity screen | true |
//! | `width` | width multiplier of both stages | 0.25 |
//! | `width1`, `width2` | per-stage width multiplier | `width` |
//! | `max_disp` | first-stage correlation range | 6 |
//! | `value_scale` | `pixels` or `keep` | `pixels` |
//! | `zero_init_residuals` | start the second stage as the identity | true |
//! | `loss_weights.1` | comma list, seven first-stage scale weights | all 1 |
//! | `loss_weights.2` | comma list, five second-stage scale weights | all 1 |
//! | `precision` | `double` or `single` | `double` |
//! | `out` | checkpoint directory | `checkpoints` |
//! | `log` | CSV log path | `<out>/train_log.csv` |

use std::collections::BTreeMap;
use std::path::PathBuf;

use super::schedule::{parse_schedule, SchedulePhase, DEFAULT_STEPS};
use super::{AdamConfig, LossConfig, PhaseConfig};
use crate::dataset::DispFormat;
use crate::error::{Error, Result};
use crate::nn::{CrlConfig, Stage, ValueScale};
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: Vec<SchedulePhase>,
    pub datasets: BTreeMap<char, PathBuf>,
    pub formats: BTreeMap<char, DispFormat>,
    pub batch: usize,
    pub batch_whole: usize,
    pub lr: f64,
    pub seed: u64,
    pub split_seed: u64,
    pub train_frac: f64,
    pub screen: bool,
    pub model: CrlConfig,
    pub loss1: LossConfig,
    pub loss2: LossConfig,
    pub precision: Precision,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut schedule: Option<(usize, Vec<SchedulePhase>)> = None;
        let mut steps = DEFAULT_STEPS;
        let mut phase_steps: Vec<(usize, usize, usize)> = Vec::new();
        let mut width: Option<f64> = None;
        let (mut width1, mut width2): (Option<f64>, Option<f64>) = (None, None);
        let mut weights1: Option<Vec<f64>> = None;
        let mut weights2: Option<Vec<f64>> = None;
        let mut cfg = TrainConfig {
            schedule: Vec::new(),
            datasets: BTreeMap::new(),
            formats: BTreeMap::new(),
            batch: 4,
            batch_whole: 2,
            lr: AdamConfig::default().lr,
            seed: 0,
            split_seed: 0,
            train_frac: 0.85,
            screen: true,
            model: CrlConfig::default(),
            loss1: LossConfig::uniform(7),
            loss2: LossConfig::uniform(5),
            precision: Precision::Double,
            out: PathBuf::from("checkpoints"),
            log: None,
        };

        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                position: line_no,
                message: msg,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected key=value, found {line:?}")))?;
            let float = |v: &str| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad(format!("{key}: {v:?} is not a number")))
            };
            let int = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| bad(format!("{key}: {v:?} is not a non-negative integer")))
            };
            let positive = |v: &str| match int(v)? {
                0 => Err(bad(format!("{key} must be positive"))),
                x => Ok(x as usize),
            };
            let boolean = |v: &str| match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(bad(format!("{key}: {v:?} is not a boolean"))),
            };
            let weights = |v: &str, count: usize| -> Result<Vec<f64>> {
                let w = v.split(',').map(|x| float(x.trim())).collect::<Result<Vec<f64>>>()?;
                if w.len() != count {
                    return Err(bad(format!("{key} needs {count} weights, found {}", w.len())));
                }
                let lc = LossConfig { weights: w.clone(), value_scale: ValueScale::default() };
                lc.validate().map_err(|e| bad(e.to_string()))?;
                Ok(w)
            };
            let tag = |k: &str| -> Result<char> {
                let mut it = k.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) if c.is_ascii_alphanumeric() => Ok(c),
                    _ => Err(bad(format!("{key}: dataset tag must be one character"))),
                }
            };

            match key {
                "schedule" => {
                    let phases = parse_schedule(value).map_err(|e| match e {
                        Error::Parse { position, message } => {
                            bad(format!("schedule, offset {position}: {message}"))
                        }
                        other => other,
                    })?;
                    schedule = Some((line_no, phases));
                }
                "steps" => steps = positive(value)?,
                "batch" => cfg.batch = positive(value)?,
                "batch.0" => cfg.batch_whole = positive(value)?,
                "lr" => {
                    cfg.lr = float(value)?;
                    if cfg.lr <= 0.0 {
                        return Err(bad("lr must be positive".into()));
                    }
                }
                "seed" => cfg.seed = int(value)?,
                "split_seed" => cfg.split_seed = int(value)?,
                "train_frac" => {
                    cfg.train_frac = float(value)?;
                    if !(0.0..=1.0).contains(&cfg.train_frac) {
                        return Err(bad("train_frac must lie in [0, 1]".into()));
                    }
                }
                "screen" => cfg.screen = boolean(value)?,
                "width" => width = Some(float(value)?),
                "width1" => width1 = Some(float(value)?),
                "width2" => width2 = Some(float(value)?),
                "max_disp" => cfg.model.max_disp = positive(value)?,
                "value_scale" => {
                    cfg.model.value_scale = ValueScale::parse(value)
                        .ok_or_else(|| bad(format!("value_scale: unknown policy {value:?}")))?
                }
                "zero_init_residuals" => cfg.model.zero_init_residuals = boolean(value)?,
                "loss_weights.1" => weights1 = Some(weights(value, 7)?),
                "loss_weights.2" => weights2 = Some(weights(value, 5)?),
                "precision" => {
                    cfg.precision = match value {
                        "double" => Precision::Double,
                        "single" => Precision::Single,
                        _ => return Err(bad(format!("precision: {value:?} is not double or single"))),
                    }
                }
                "out" => cfg.out = PathBuf::from(value),
                "log" => cfg.log = Some(PathBuf::from(value)),
                _ => {
                    if let Some(t) = key.strip_prefix("dataset.") {
                        cfg.datasets.insert(tag(t)?, PathBuf::from(value));
                    } else if let Some(t) = key.strip_prefix("format.") {
                        let f = DispFormat::parse(value)
                            .ok_or_else(|| bad(format!("{key}: unknown format {value:?}")))?;
                        cfg.formats.insert(tag(t)?, f);
                    } else if let Some(i) = key.strip_prefix("steps.") {
                        let i = i
                            .parse::<usize>()
                            .ok()
                            .filter(|i| *i > 0)
                            .ok_or_else(|| bad(format!("{key}: phase number must be 1 or more")))?;
                        phase_steps.push((line_no, i, positive(value)?));
                    } else {
                        return Err(bad(format!("unknown key {key:?}")));
                    }
                }
            }
        }

        let (schedule_line, mut phases) = schedule.ok_or(Error::Parse {
            position: text.lines().count().max(1),
            message: "missing schedule".into(),
        })?;
        for p in &mut phases {
            p.steps = steps;
        }
        let count = phases.len();
        for (line_no, i, s) in phase_steps {
            let p = phases.get_mut(i - 1).ok_or(Error::Parse {
                position: line_no,
                message: format!("steps.{i}: schedule has only {count} phases"),
            })?;
            p.steps = s;
        }
        for p in &phases {
            if !cfg.datasets.contains_key(&p.dataset) {
                return Err(Error::Parse {
                    position: schedule_line,
                    message: format!("phase {p} uses tag {} but no dataset.{} is given", p.dataset, p.dataset),
                });
            }
        }
        cfg.schedule = phases;
        cfg.model.width1 = width1.or(width).unwrap_or(cfg.model.width1);
        cfg.model.width2 = width2.or(width).unwrap_or(cfg.model.width2);
        cfg.model.seed = cfg.seed;
        let vs = cfg.model.value_scale;
        cfg.loss1 = LossConfig { weights: weights1.unwrap_or(vec![1.0; 7]), value_scale: vs };
        cfg.loss2 = LossConfig { weights: weights2.unwrap_or(vec![1.0; 5]), value_scale: vs };
        Ok(cfg)
    }

    pub fn format(&self, tag: char) -> DispFormat {
        self.formats.get(&tag).copied().unwrap_or(DispFormat::Pfm)
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| self.out.join("train_log.csv"))
    }

    /// Optimiser and loss settings for one phase.
    pub fn phase_config(&self, phase: &SchedulePhase) -> PhaseConfig {
        PhaseConfig {
            batch: if phase.stage == Stage::Both { self.batch_whole } else { self.batch },
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            loss1: self.loss1.clone(),
            loss2: self.loss2.clone(),
            seed: self.seed,
            nan_patience: 3,
        }
    }
}
