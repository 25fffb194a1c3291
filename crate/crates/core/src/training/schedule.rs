//! Schedule strings such as `1F-1K-2F-2K-0K`: dash-separated pairs of a
//! stage digit (1, 2, or 0 for the whole network) and a dataset tag.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::Stage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulePhase {
    pub stage: Stage,
    pub dataset: char,
    pub steps: usize,
}

impl fmt::Display for SchedulePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.stage.digit(), self.dataset)
    }
}

/// Steps per phase when the configuration names none.
pub const DEFAULT_STEPS: usize = 10_000;

/// Parses a schedule. Errors carry the byte offset of the offending segment.
/// Whole-network phases are accepted only once both stages have been
/// trained on their own.
pub fn parse_schedule(text: &str) -> Result<Vec<SchedulePhase>> {
    let mut phases = Vec::new();
    let (mut seen1, mut seen2) = (false, false);
    let mut offset = 0;
    for segment in text.split('-') {
        let err = |message: String| Error::Parse {
            position: offset,
            message,
        };
        let chars: Vec<char> = segment.chars().collect();
        if chars.len() != 2 {
            return Err(err(format!("segment {segment:?} is not a stage digit and a dataset tag")));
        }
        let stage = chars[0]
            .to_digit(10)
            .and_then(|d| Stage::from_digit(d as u8))
            .ok_or_else(|| err(format!("unknown stage {:?}", chars[0])))?;
        let tag = chars[1];
        if !tag.is_ascii_alphanumeric() {
            return Err(err(format!("dataset tag {tag:?} is not alphanumeric")));
        }
        match stage {
            Stage::First => seen1 = true,
            Stage::Second => seen2 = true,
            Stage::Both if !(seen1 && seen2) => {
                return Err(err(
                    "whole-network phase before both stages were trained".to_string()
                ))
            }
            Stage::Both => {}
        }
        phases.push(SchedulePhase {
            stage,
            dataset: tag,
            steps: DEFAULT_STEPS,
        });
        offset += segment.len() + 1;
    }
    Ok(phases)
}

pub fn render_schedule(phases: &[SchedulePhase]) -> String {
    phases.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("-")
}
