//! Text relevance from cross-attention, used to rank and select regions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::aggregation::{normalize_distribution, WeightVector};
use crate::interp::{upsample_bilinear, Resampler};
use crate::masking::LabelMask;
use crate::stack::AttentionStack;

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("stack has no cross-attention (capture with a non-empty prompt)")]
    MissingCrossAttention,
    #[error("token selection is empty")]
    EmptySelection,
    #[error("token index {index} out of range for {count} tokens")]
    TokenOutOfRange { index: usize, count: usize },
    #[error("{actual} weights supplied for {expected} cross-attention layers")]
    WeightCount { expected: usize, actual: usize },
    #[error("layer side {side} cannot be upsampled to {target}")]
    BadTarget { side: usize, target: usize },
    #[error("no region scores to select from")]
    EmptyScores,
    #[error("invalid selection policy: {0}")]
    InvalidPolicy(String),
}

/// Where text relevance enters the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Rank regions of the unconditioned segmentation.
    #[default]
    Rank,
    /// Experimental: multiply every aggregated map by relevance before merging.
    AnchorWeighting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub side: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelection {
    pub indices: BTreeSet<usize>,
    pub strings: Vec<String>,
}

/// Tokenizer specials look like `<|startoftext|>`.
pub fn is_special_token(token: &str) -> bool {
    let t = token.trim();
    t.is_empty() || (t.starts_with("<|") && t.ends_with("|>"))
}

impl TokenSelection {
    pub fn new(indices: BTreeSet<usize>, tokens: &[String]) -> Result<Self, GuidanceError> {
        if indices.is_empty() {
            return Err(GuidanceError::EmptySelection);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= tokens.len()) {
            return Err(GuidanceError::TokenOutOfRange {
                index: bad,
                count: tokens.len(),
            });
        }
        let strings = indices.iter().map(|&i| tokens[i].clone()).collect();
        Ok(Self { indices, strings })
    }

    /// Every non-special prompt token.
    pub fn prompt_tokens(tokens: &[String]) -> Result<Self, GuidanceError> {
        let indices = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| !is_special_token(t))
            .map(|(i, _)| i)
            .collect();
        Self::new(indices, tokens)
    }
}

pub fn build_relevance_map(
    stack: &AttentionStack,
    weights: &WeightVector,
    target: usize,
    tokens: &TokenSelection,
) -> Result<RelevanceMap, GuidanceError> {
    let cross = stack
        .cross_attention
        .as_ref()
        .filter(|c| !c.is_empty())
        .ok_or(GuidanceError::MissingCrossAttention)?;
    if tokens.indices.is_empty() {
        return Err(GuidanceError::EmptySelection);
    }
    if weights.len() != cross.len() {
        return Err(GuidanceError::WeightCount {
            expected: cross.len(),
            actual: weights.len(),
        });
    }
    let mut acc = vec![0.0f64; target * target];
    for (layer, &w) in cross.iter().zip(weights.as_slice()) {
        let side = layer.resolution.side();
        if let Some(&bad) = tokens.indices.iter().find(|&&i| i >= layer.token_count) {
            return Err(GuidanceError::TokenOutOfRange {
                index: bad,
                count: layer.token_count,
            });
        }
        let slice: Vec<f64> = (0..side * side)
            .map(|cell| {
                let row = layer.row(cell / side, cell % side);
                tokens.indices.iter().map(|&t| f64::from(row[t])).sum()
            })
            .collect();
        let up = upsample_bilinear(&slice, side, side, target)
            .map_err(|_| GuidanceError::BadTarget { side, target })?;
        for (a, u) in acc.iter_mut().zip(&up) {
            *a += w * u;
        }
    }
    normalize_distribution(&mut acc);
    Ok(RelevanceMap {
        side: target,
        values: acc,
    })
}

/// Scores are compared at this relative resolution so ulp noise cannot reorder ties.
const SCORE_QUANTUM: f64 = 1e-9;

/// Mean upsampled relevance per present label, best first, ties by label.
pub fn score_regions(mask: &LabelMask, relevance: &RelevanceMap) -> Vec<(u32, f64)> {
    let mut up = vec![0.0f64; mask.width * mask.height];
    Resampler::new(relevance.side, relevance.side, mask.height, mask.width)
        .resample_into(&relevance.values, &mut up);
    normalize_distribution(&mut up);

    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (&l, &v) in mask.labels.iter().zip(&up) {
        let e = sums.entry(l).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let mut scores: Vec<(u32, f64)> = sums
        .into_iter()
        .map(|(l, (s, n))| (l, s / n as f64))
        .collect();
    let max = scores.iter().map(|s| s.1).fold(0.0f64, f64::max);
    let key = |s: f64| {
        if max > 0.0 {
            (s / max / SCORE_QUANTUM).round() as i64
        } else {
            0
        }
    };
    scores.sort_by(|a, b| key(b.1).cmp(&key(a.1)).then(a.0.cmp(&b.0)));
    scores
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SelectionPolicy {
    #[default]
    Top1,
    Ratio(f64),
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        match *self {
            SelectionPolicy::Ratio(r) if !(r > 0.0 && r <= 1.0) => Err(
                GuidanceError::InvalidPolicy(format!("ratio {r} outside (0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionPolicy::Top1 => write!(f, "top1"),
            SelectionPolicy::Ratio(r) => write!(f, "ratio:{r}"),
        }
    }
}

impl FromStr for SelectionPolicy {
    type Err = GuidanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let policy = match s {
            "top1" => SelectionPolicy::Top1,
            other => match other.strip_prefix("ratio:") {
                Some(r) => SelectionPolicy::Ratio(
                    r.parse()
                        .map_err(|_| GuidanceError::InvalidPolicy(other.to_string()))?,
                ),
                None => return Err(GuidanceError::InvalidPolicy(other.to_string())),
            },
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl Serialize for SelectionPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SelectionPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn auto_select(
    scores: &[(u32, f64)],
    policy: SelectionPolicy,
) -> Result<BTreeSet<u32>, GuidanceError> {
    policy.validate()?;
    let best = scores.first().ok_or(GuidanceError::EmptyScores)?;
    Ok(match policy {
        SelectionPolicy::Top1 => BTreeSet::from([best.0]),
        SelectionPolicy::Ratio(rho) => {
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let threshold = rho * max - SCORE_QUANTUM * max.abs();
            scores
                .iter()
                .filter(|s| s.1 >= threshold)
                .map(|s| s.0)
                .collect()
        }
    })
}
