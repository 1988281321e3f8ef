//! Attention tensor types captured from a diffusion U-Net pass.
//!
//! A self-attention tensor at latent side `s` holds `s * s` maps, each an
//! `s * s` probability distribution over spatial locations. Storage is a
//! single row-major `f32` buffer of `s^4` elements: `data[((i * s + j) * s + y) * s + z]`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Tolerance on softmax row sums in captured tensors.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

/// Default diffusion timestep used at capture.
pub const DEFAULT_TIMESTEP: u32 = 300;

/// Side length of a square latent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Resolution(usize);

impl Resolution {
    pub fn new(side: usize) -> Option<Self> {
        (side >= 1).then_some(Self(side))
    }

    #[inline]
    pub fn side(self) -> usize {
        self.0
    }

    /// Number of cells in the 2-D grid.
    #[inline]
    pub fn cells(self) -> usize {
        self.0 * self.0
    }

    pub fn divides(self, target: usize) -> bool {
        target.is_multiple_of(self.0)
    }
}

impl TryFrom<usize> for Resolution {
    type Error = String;

    fn try_from(side: usize) -> Result<Self, Self::Error> {
        Resolution::new(side).ok_or_else(|| "resolution must be >= 1".to_string())
    }
}

impl From<Resolution> for usize {
    fn from(r: Resolution) -> usize {
        r.0
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.0)
    }
}

/// One self-attention layer, dims `(s, s, s, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub layer_index: u32,
    pub resolution: Resolution,
    pub data: Vec<f32>,
}

impl AttentionTensor {
    pub fn new(layer_index: u32, resolution: Resolution, data: Vec<f32>) -> Self {
        Self {
            layer_index,
            resolution,
            data,
        }
    }

    pub fn expected_len(&self) -> usize {
        self.resolution.cells() * self.resolution.cells()
    }

    /// The 2-D attention map referenced from location `(i, j)`.
    pub fn map(&self, i: usize, j: usize) -> &[f32] {
        let cells = self.resolution.cells();
        let start = (i * self.resolution.side() + j) * cells;
        &self.data[start..start + cells]
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.resolution.side();
        [s, s, s, s]
    }
}

/// One cross-attention layer, dims `(s, s, tokens)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionTensor {
    pub layer_index: u32,
    pub resolution: Resolution,
    pub token_count: usize,
    pub data: Vec<f32>,
}

impl CrossAttentionTensor {
    pub fn new(layer_index: u32, resolution: Resolution, token_count: usize, data: Vec<f32>) -> Self {
        Self {
            layer_index,
            resolution,
            token_count,
            data,
        }
    }

    pub fn expected_len(&self) -> usize {
        self.resolution.cells() * self.token_count
    }

    /// Token distribution at spatial location `(i, j)`.
    pub fn row(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.resolution.side() + j) * self.token_count;
        &self.data[start..start + self.token_count]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.resolution.side();
        [s, s, self.token_count]
    }
}

/// Capture provenance, serialized as the archive's `meta` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureMetadata {
    pub model_id: String,
    pub timestep: u32,
    pub prompt: String,
    #[serde(rename = "tokens")]
    pub token_strings: Vec<String>,
    pub image_source: String,
    pub latent_size: u32,
    /// Keys written by extractors beyond the required set.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Default for CaptureMetadata {
    fn default() -> Self {
        Self {
            model_id: "CompVis/stable-diffusion-v1-4".to_string(),
            timestep: DEFAULT_TIMESTEP,
            prompt: String::new(),
            token_strings: Vec::new(),
            image_source: String::new(),
            latent_size: 64,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub self_attention: Vec<AttentionTensor>,
    pub cross_attention: Option<Vec<CrossAttentionTensor>>,
    pub metadata: CaptureMetadata,
}

impl AttentionStack {
    pub fn resolutions(&self) -> Vec<Resolution> {
        self.self_attention.iter().map(|t| t.resolution).collect()
    }

    pub fn has_cross_attention(&self) -> bool {
        self.cross_attention.as_ref().is_some_and(|c| !c.is_empty())
    }

    /// Count of layers per side, ascending.
    pub fn census(&self) -> BTreeMap<usize, usize> {
        let mut census = BTreeMap::new();
        for t in &self.self_attention {
            *census.entry(t.resolution.side()).or_insert(0) += 1;
        }
        census
    }
}

/// A single invariant violation found by [`validate_stack`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyStack,
    LayerOrder {
        previous: u32,
        layer: u32,
    },
    DataLength {
        layer: u32,
        expected: usize,
        actual: usize,
    },
    NegativeEntry {
        layer: u32,
        index: Vec<usize>,
        value: f32,
    },
    NonFinite {
        layer: u32,
        index: Vec<usize>,
    },
    RowSum {
        layer: u32,
        i: usize,
        j: usize,
        sum: f64,
    },
    CrossRowSum {
        layer: u32,
        i: usize,
        j: usize,
        sum: f64,
    },
    SequenceMismatch {
        position: usize,
        detail: String,
    },
    TokenCount {
        expected: usize,
        actual: usize,
    },
    Timestep(u32),
}

impl Violation {
    pub fn layer(&self) -> Option<u32> {
        match self {
            Violation::LayerOrder { layer, .. }
            | Violation::DataLength { layer, .. }
            | Violation::NegativeEntry { layer, .. }
            | Violation::NonFinite { layer, .. }
            | Violation::RowSum { layer, .. }
            | Violation::CrossRowSum { layer, .. } => Some(*layer),
            _ => None,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyStack => write!(f, "stack has no self-attention tensors"),
            Violation::LayerOrder { previous, layer } => write!(
                f,
                "layer index {layer} does not strictly increase after {previous}"
            ),
            Violation::DataLength {
                layer,
                expected,
                actual,
            } => write!(f, "layer {layer}: expected {expected} values, found {actual}"),
            Violation::NegativeEntry {
                layer,
                index,
                value,
            } => write!(f, "layer {layer}: negative entry {value} at {index:?}"),
            Violation::NonFinite { layer, index } => {
                write!(f, "layer {layer}: non-finite entry at {index:?}")
            }
            Violation::RowSum { layer, i, j, sum } => write!(
                f,
                "layer {layer}: row ({i}, {j}) sums to {sum}, outside 1 +/- {ROW_SUM_TOLERANCE}"
            ),
            Violation::CrossRowSum { layer, i, j, sum } => write!(
                f,
                "cross layer {layer}: token row ({i}, {j}) sums to {sum}, outside 1 +/- {ROW_SUM_TOLERANCE}"
            ),
            Violation::SequenceMismatch { position, detail } => {
                write!(f, "sequence mismatch at position {position}: {detail}")
            }
            Violation::TokenCount { expected, actual } => write!(
                f,
                "metadata lists {actual} token strings, cross-attention has {expected} tokens"
            ),
            Violation::Timestep(t) => write!(f, "timestep {t} must be >= 1"),
        }
    }
}

/// Enumerates every invariant violation in `stack`. Never fails.
pub fn validate_stack(stack: &AttentionStack) -> Vec<Violation> {
    let mut out = Vec::new();
    if stack.self_attention.is_empty() {
        out.push(Violation::EmptyStack);
    }
    if stack.metadata.timestep < 1 {
        out.push(Violation::Timestep(stack.metadata.timestep));
    }

    let mut previous: Option<u32> = None;
    for t in &stack.self_attention {
        if let Some(p) = previous {
            if t.layer_index <= p {
                out.push(Violation::LayerOrder {
                    previous: p,
                    layer: t.layer_index,
                });
            }
        }
        previous = Some(t.layer_index);
        validate_self_tensor(t, &mut out);
    }

    if let Some(cross) = &stack.cross_attention {
        if cross.len() != stack.self_attention.len() {
            out.push(Violation::SequenceMismatch {
                position: cross.len().min(stack.self_attention.len()),
                detail: format!(
                    "{} cross-attention layers for {} self-attention layers",
                    cross.len(),
                    stack.self_attention.len()
                ),
            });
        }
        for (position, (c, s)) in cross.iter().zip(&stack.self_attention).enumerate() {
            if c.layer_index != s.layer_index || c.resolution != s.resolution {
                out.push(Violation::SequenceMismatch {
                    position,
                    detail: format!(
                        "cross layer {} at {} vs self layer {} at {}",
                        c.layer_index, c.resolution, s.layer_index, s.resolution
                    ),
                });
            }
        }
        for c in cross {
            validate_cross_tensor(c, &mut out);
        }
        if let Some(first) = cross.first() {
            let mismatched_tokens = cross.iter().any(|c| c.token_count != first.token_count);
            if mismatched_tokens {
                out.push(Violation::SequenceMismatch {
                    position: 0,
                    detail: "cross-attention layers disagree on token count".to_string(),
                });
            }
            if stack.metadata.token_strings.len() != first.token_count {
                out.push(Violation::TokenCount {
                    expected: first.token_count,
                    actual: stack.metadata.token_strings.len(),
                });
            }
        }
    }
    out
}

fn validate_self_tensor(t: &AttentionTensor, out: &mut Vec<Violation>) {
    let layer = t.layer_index;
    let expected = t.expected_len();
    if t.data.len() != expected {
        out.push(Violation::DataLength {
            layer,
            expected,
            actual: t.data.len(),
        });
        return;
    }
    let s = t.resolution.side();
    for i in 0..s {
        for j in 0..s {
            let row = t.map(i, j);
            let mut sum = 0.0f64;
            for (k, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    out.push(Violation::NonFinite {
                        layer,
                        index: vec![i, j, k / s, k % s],
                    });
                    continue;
                }
                if v < 0.0 {
                    out.push(Violation::NegativeEntry {
                        layer,
                        index: vec![i, j, k / s, k % s],
                        value: v,
                    });
                }
                sum += f64::from(v);
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                out.push(Violation::RowSum { layer, i, j, sum });
            }
        }
    }
}

fn validate_cross_tensor(c: &CrossAttentionTensor, out: &mut Vec<Violation>) {
    let layer = c.layer_index;
    let expected = c.expected_len();
    if c.token_count == 0 || c.data.len() != expected {
        out.push(Violation::DataLength {
            layer,
            expected,
            actual: c.data.len(),
        });
        return;
    }
    let s = c.resolution.side();
    for i in 0..s {
        for j in 0..s {
            let mut sum = 0.0f64;
            for (k, &v) in c.row(i, j).iter().enumerate() {
                if !v.is_finite() {
                    out.push(Violation::NonFinite {
                        layer,
                        index: vec![i, j, k],
                    });
                    continue;
                }
                if v < 0.0 {
                    out.push(Violation::NegativeEntry {
                        layer,
                        index: vec![i, j, k],
                        value: v,
                    });
                }
                sum += f64::from(v);
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                out.push(Violation::CrossRowSum { layer, i, j, sum });
            }
        }
    }
}
