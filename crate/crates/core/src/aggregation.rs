//! Fusion of multi-resolution self-attention into one target-resolution tensor.
//!
//! Every layer map is bilinearly upsampled to `R x R`, the layer referenced by
//! target location `(I, J)` is the one at `(I / d, J / d)` with `d = R / side`,
//! and the weighted sum over layers is renormalized into a distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp::Resampler;
use crate::stack::{AttentionStack, Resolution};

pub const DEFAULT_TARGET: usize = 64;

/// Tolerance on the weight vector summing to one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no resolutions to weight")]
    Empty,
    #[error("layer {layer} side {side} does not divide target {target}")]
    NotDividing {
        layer: u32,
        side: usize,
        target: usize,
    },
    #[error("{actual} weights supplied for {expected} layers")]
    WeightCount { expected: usize, actual: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Proportional,
    Uniform,
}

impl std::str::FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proportional" => Ok(WeightMode::Proportional),
            "uniform" => Ok(WeightMode::Uniform),
            other => Err(format!("unknown weight mode '{other}'")),
        }
    }
}

/// Per-layer weights, non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Normalizes raw non-negative weights to sum to one.
    pub fn normalized(raw: &[f64]) -> Result<Self, AggregationError> {
        if raw.is_empty() {
            return Err(AggregationError::Empty);
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(AggregationError::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(AggregationError::InvalidWeights("weights sum to zero".into()));
        }
        Ok(Self(raw.iter().map(|w| w / total).collect()))
    }

    /// Accepts weights that already sum to one.
    pub fn from_normalized(weights: Vec<f64>) -> Result<Self, AggregationError> {
        if weights.is_empty() {
            return Err(AggregationError::Empty);
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE
        {
            return Err(AggregationError::InvalidWeights(format!(
                "weights must be non-negative and sum to 1, got sum {total}"
            )));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn compute_weights(
    resolutions: &[Resolution],
    mode: WeightMode,
) -> Result<WeightVector, AggregationError> {
    if resolutions.is_empty() {
        return Err(AggregationError::Empty);
    }
    let raw: Vec<f64> = match mode {
        WeightMode::Proportional => resolutions.iter().map(|r| r.side() as f64).collect(),
        WeightMode::Uniform => vec![1.0; resolutions.len()],
    };
    WeightVector::normalized(&raw)
}

/// `R^2` maps of `R^2` cells each, every map a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedTensor {
    side: usize,
    data: Vec<f64>,
}

impl AggregatedTensor {
    /// Wraps raw data, checking shape only.
    pub fn from_raw(side: usize, data: Vec<f64>) -> Option<Self> {
        (side >= 1 && data.len() == side.pow(4)).then_some(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    /// Number of maps (equal to `cells`).
    pub fn map_count(&self) -> usize {
        self.cells()
    }

    pub fn map(&self, i: usize, j: usize) -> &[f64] {
        self.map_at(i * self.side + j)
    }

    /// Map at flat grid index `i * R + j`.
    pub fn map_at(&self, flat: usize) -> &[f64] {
        let c = self.cells();
        &self.data[flat * c..(flat + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Multiplies every map by `weights` cell-wise and renormalizes.
    pub fn reweighted(&self, weights: &[f64]) -> Self {
        assert_eq!(weights.len(), self.cells());
        let mut data = self.data.clone();
        data.par_chunks_mut(self.cells()).for_each(|map| {
            for (v, w) in map.iter_mut().zip(weights) {
                *v *= w;
            }
            normalize_distribution(map);
        });
        Self {
            side: self.side,
            data,
        }
    }
}

/// Scales `values` to sum to one; an all-zero input becomes uniform.
pub fn normalize_distribution(values: &mut [f64]) {
    let total: f64 = values.iter().sum();
    if total > 0.0 && total.is_finite() {
        let inv = 1.0 / total;
        for v in values.iter_mut() {
            *v *= inv;
        }
    } else {
        let u = 1.0 / values.len() as f64;
        values.fill(u);
    }
}

pub fn aggregate_stack(
    stack: &AttentionStack,
    weights: &WeightVector,
    target: usize,
) -> Result<AggregatedTensor, AggregationError> {
    let layers = &stack.self_attention;
    if layers.is_empty() {
        return Err(AggregationError::Empty);
    }
    if weights.len() != layers.len() {
        return Err(AggregationError::WeightCount {
            expected: layers.len(),
            actual: weights.len(),
        });
    }
    for t in layers {
        if !t.resolution.divides(target) {
            return Err(AggregationError::NotDividing {
                layer: t.layer_index,
                side: t.resolution.side(),
                target,
            });
        }
    }

    let cells = target * target;
    let mut data = vec![0.0f64; cells * cells];
    // one chunk per target row I: `target` maps of `cells` values
    data.par_chunks_mut(target * cells)
        .enumerate()
        .for_each(|(row, chunk)| {
            let mut up = vec![0.0f64; cells];
            for (t, &w) in layers.iter().zip(weights.as_slice()) {
                let side = t.resolution.side();
                let stride = target / side;
                let si = row / stride;
                let mut resampler = Resampler::new(side, side, target, target);
                for sj in 0..side {
                    resampler.resample_into(t.map(si, sj), &mut up);
                    for col in sj * stride..(sj + 1) * stride {
                        let dst = &mut chunk[col * cells..(col + 1) * cells];
                        for (d, u) in dst.iter_mut().zip(&up) {
                            *d += w * u;
                        }
                    }
                }
            }
            for map in chunk.chunks_mut(cells) {
                normalize_distribution(map);
            }
        });

    Ok(AggregatedTensor { side: target, data })
}
