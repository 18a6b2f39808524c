//! Splitting a block-design run into stimulus and recovery windows.
//!
//! A volume with index `k` is acquired at `k * TR` seconds. It belongs to a
//! window `[a, b)` of a block with onset `o` iff `o + a <= k * TR < o + b`.
//! With TR = 2 s and windows `[10, 20)` / `[30, 40)` this picks the 6th-10th
//! and 16th-20th volumes of each 40 s block: five images per window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BlockError {
    #[error("window [{start}, {end}) s does not fit the design: {reason}")]
    WindowOutOfRange { start: f64, end: f64, reason: String },
    #[error("window length {length} s is not a multiple of TR {tr} s")]
    TrIncompatible { length: f64, tr: f64 },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Positive,
    Negative,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Positive => "positive",
            Condition::Negative => "negative",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" | "pos" => Ok(Condition::Positive),
            "negative" | "neg" => Ok(Condition::Negative),
            other => Err(format!("unknown condition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stim,
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockOnset {
    pub condition: Condition,
    pub onset_s: f64,
}

fn default_block_length() -> f64 {
    40.0
}
fn default_stim_window() -> (f64, f64) {
    (10.0, 20.0)
}
fn default_rest_window() -> (f64, f64) {
    (30.0, 40.0)
}
fn default_lead_in() -> f64 {
    20.0
}

/// Task paradigm. On disk this is the design JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDesign {
    /// TR the design was written for; checked against the volume when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tr_s: Option<f64>,
    #[serde(default = "default_lead_in")]
    pub lead_in_s: f64,
    #[serde(default = "default_block_length")]
    pub block_length_s: f64,
    pub blocks: Vec<BlockOnset>,
    #[serde(default = "default_stim_window")]
    pub stim_window_s: (f64, f64),
    #[serde(default = "default_rest_window")]
    pub rest_window_s: (f64, f64),
}

impl BlockDesign {
    /// Lead-in rest followed by alternating positive / negative blocks.
    pub fn alternating(tr_s: f64, blocks_per_condition: usize) -> Self {
        let lead_in_s = default_lead_in();
        let block_length_s = default_block_length();
        let blocks = (0..2 * blocks_per_condition)
            .map(|i| BlockOnset {
                condition: if i % 2 == 0 { Condition::Positive } else { Condition::Negative },
                onset_s: lead_in_s + i as f64 * block_length_s,
            })
            .collect();
        Self {
            tr_s: Some(tr_s),
            lead_in_s,
            block_length_s,
            blocks,
            stim_window_s: default_stim_window(),
            rest_window_s: default_rest_window(),
        }
    }

    /// Seconds from run start to the end of the last block.
    pub fn duration_s(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.onset_s + self.block_length_s)
            .fold(self.lead_in_s, f64::max)
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        if !(self.block_length_s.is_finite() && self.block_length_s > 0.0) {
            return Err(BlockError::InvalidDesign(format!("block length {}", self.block_length_s)));
        }
        if !(self.lead_in_s.is_finite() && self.lead_in_s >= 0.0) {
            return Err(BlockError::InvalidDesign(format!("lead-in {}", self.lead_in_s)));
        }
        let mut prev = f64::NEG_INFINITY;
        for b in &self.blocks {
            if !(b.onset_s.is_finite() && b.onset_s >= 0.0) || b.onset_s <= prev {
                return Err(BlockError::InvalidDesign(
                    "onsets must be non-negative and strictly increasing".into(),
                ));
            }
            prev = b.onset_s;
        }
        for (start, end) in [self.stim_window_s, self.rest_window_s] {
            if !(start >= 0.0 && end > start && end <= self.block_length_s) {
                return Err(BlockError::WindowOutOfRange {
                    start,
                    end,
                    reason: format!("must satisfy 0 <= start < end <= {}", self.block_length_s),
                });
            }
        }
        let stim_len = self.stim_window_s.1 - self.stim_window_s.0;
        let rest_len = self.rest_window_s.1 - self.rest_window_s.0;
        if (stim_len - rest_len).abs() > 1e-9 {
            return Err(BlockError::InvalidDesign(format!(
                "stimulus window ({stim_len} s) and rest window ({rest_len} s) differ in length"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub subject_id: String,
    pub condition: Condition,
    /// Position of this block among the subject's blocks.
    pub block_index: usize,
    pub stim_volumes: Vec<usize>,
    pub rest_volumes: Vec<usize>,
}

impl Block {
    pub fn volumes(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Stim => &self.stim_volumes,
            Phase::Rest => &self.rest_volumes,
        }
    }
}

const EPS: f64 = 1e-9;

fn window_indices(onset: f64, window: (f64, f64), tr: f64, nt: usize) -> Result<Vec<usize>, BlockError> {
    let length = window.1 - window.0;
    let per = length / tr;
    if (per - per.round()).abs() > EPS || per.round() < 1.0 {
        return Err(BlockError::TrIncompatible { length, tr });
    }
    let lo = onset + window.0;
    let hi = onset + window.1;
    let first = (lo / tr - EPS).ceil().max(0.0) as usize;
    let idx: Vec<usize> = (first..).take_while(|&k| (k as f64) * tr < hi - EPS * tr).collect();
    if idx.last().is_some_and(|&k| k >= nt) {
        return Err(BlockError::WindowOutOfRange {
            start: lo,
            end: hi,
            reason: format!("run has only {nt} volumes ({} s)", nt as f64 * tr),
        });
    }
    Ok(idx)
}

/// One [`Block`] per entry of `design.blocks`, in design order.
pub fn split_blocks(nt: usize, tr_seconds: f64, design: &BlockDesign, subject_id: &str) -> Result<Vec<Block>, BlockError> {
    design.validate()?;
    if let Some(tr) = design.tr_s {
        if (tr - tr_seconds).abs() > 1e-6 {
            return Err(BlockError::InvalidDesign(format!(
                "design written for TR {tr} s but volume has TR {tr_seconds} s"
            )));
        }
    }
    design
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            Ok(Block {
                subject_id: subject_id.to_string(),
                condition: b.condition,
                block_index: i,
                stim_volumes: window_indices(b.onset_s, design.stim_window_s, tr_seconds, nt)?,
                rest_volumes: window_indices(b.onset_s, design.rest_window_s, tr_seconds, nt)?,
            })
        })
        .collect()
}

/// All blocks of one condition, subject order then block order.
pub fn pool_blocks(per_subject: &[Vec<Block>], condition: Condition) -> Vec<Block> {
    per_subject.iter().flatten().filter(|b| b.condition == condition).cloned().collect()
}
