//! Quantile partitioning of training scores into intervals and the
//! interval-to-text prompt rendering.
//!
//! Scores are recast as classes: interval `r` of `R` spans
//! `S*(floor((N-1)(r-1)/R)) ..= S*(floor((N-1)r/R))` over the ascending
//! score list `S*` (0-based), so adjacent intervals share a bound and the
//! partition covers `[min S, max S]` exactly.

use std::fmt::Write as _;

use thiserror::Error;

use crate::words::{number_to_words, WordsError};

#[derive(Debug, Error)]
pub enum ScoreSpaceError {
    #[error("need at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("interval count {r} outside 1..={max}")]
    BadIntervalCount { r: usize, max: usize },
    #[error("all {0} scores are identical; score distribution is degenerate")]
    DegenerateDistribution(usize),
    #[error("no intervals given")]
    EmptyPartition,
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error(transparent)]
    Words(#[from] WordsError),
}

/// One quantile bucket. `index` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreInterval {
    pub index: usize,
    pub left: f64,
    pub right: f64,
}

/// The trained score space: interval bounds plus the overall range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePartition {
    pub intervals: Vec<ScoreInterval>,
}

impl ScorePartition {
    pub fn class_count(&self) -> usize {
        self.intervals.len()
    }

    pub fn min(&self) -> f64 {
        self.intervals[0].left
    }

    pub fn max(&self) -> f64 {
        self.intervals[self.intervals.len() - 1].right
    }

    pub fn range(&self) -> (f64, f64) {
        (self.min(), self.max())
    }

    /// Plain-text audit table, one `r left right` line per interval.
    pub fn export_table(&self) -> String {
        let mut out = String::from("# r zeta_left zeta_right\n");
        for iv in &self.intervals {
            writeln!(out, "{} {:.6} {:.6}", iv.index, iv.left, iv.right).unwrap();
        }
        out
    }

    pub fn parse_table(text: &str) -> Result<Self, ScoreSpaceError> {
        let mut intervals = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let bad = || ScoreSpaceError::EmptyPartition;
            let index: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let left: f64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let right: f64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            intervals.push(ScoreInterval { index, left, right });
        }
        if intervals.is_empty() {
            return Err(ScoreSpaceError::EmptyPartition);
        }
        Ok(ScorePartition { intervals })
    }
}

/// Quantile partition of `scores` into `R` intervals with shared bounds.
pub fn partition_scores(scores: &[f64], r_count: usize) -> Result<ScorePartition, ScoreSpaceError> {
    let n = scores.len();
    if n < 2 {
        return Err(ScoreSpaceError::TooFewScores(n));
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(ScoreSpaceError::NonFinite(s));
        }
    }
    if r_count < 1 || r_count > n - 1 {
        return Err(ScoreSpaceError::BadIntervalCount {
            r: r_count,
            max: n - 1,
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted[0] == sorted[n - 1] {
        return Err(ScoreSpaceError::DegenerateDistribution(n));
    }
    let intervals = (1..=r_count)
        .map(|r| {
            let li = (n - 1) * (r - 1) / r_count;
            let ri = (n - 1) * r / r_count;
            ScoreInterval {
                index: r,
                left: sorted[li],
                right: sorted[ri],
            }
        })
        .collect();
    Ok(ScorePartition { intervals })
}

/// Class of `score` under half-open intervals (the last one closed on the
/// right). Scores outside the partition range clamp to the nearest class.
/// Returns a 1-based index.
pub fn classify_score(score: f64, partition: &ScorePartition) -> Result<usize, ScoreSpaceError> {
    let ivs = &partition.intervals;
    if ivs.is_empty() {
        return Err(ScoreSpaceError::EmptyPartition);
    }
    if score < ivs[0].left {
        return Ok(1);
    }
    for iv in ivs {
        if score >= iv.left && score < iv.right {
            return Ok(iv.index);
        }
    }
    Ok(ivs[ivs.len() - 1].index)
}

/// A K-class textual prompt: learnable slots followed by the rendered
/// interval bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptText {
    pub class_index: usize,
    pub learnable_slot_count: usize,
    pub tokens: Vec<String>,
}

pub const LEARNABLE_TOKEN: &str = "[X]";

/// Render one prompt per interval: `slot_count` learnable tokens, then
/// "<left words> to <right words>" at one decimal.
pub fn build_prompt_texts(
    partition: &ScorePartition,
    slot_count: usize,
    decimals: usize,
) -> Result<Vec<PromptText>, ScoreSpaceError> {
    partition
        .intervals
        .iter()
        .map(|iv| {
            let mut tokens = vec![LEARNABLE_TOKEN.to_string(); slot_count];
            tokens.extend(number_to_words(iv.left, decimals)?);
            tokens.push("to".to_string());
            tokens.extend(number_to_words(iv.right, decimals)?);
            Ok(PromptText {
                class_index: iv.index,
                learnable_slot_count: slot_count,
                tokens,
            })
        })
        .collect()
}
