//! Label masks from proposals via per-pixel argmax, and region utilities.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp::Resampler;
use crate::merging::ProposalSet;

pub const DEFAULT_OUTPUT_SIZE: usize = 512;

pub const GT_COLOR: [u8; 3] = [255, 0, 0];
pub const PRED_COLOR: [u8; 3] = [0, 255, 0];

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("proposal set is empty")]
    EmptyProposals,
    #[error("output {width}x{height} is smaller than proposal resolution {side}")]
    OutputTooSmall {
        width: usize,
        height: usize,
        side: usize,
    },
    #[error("unknown label id(s) {0:?}")]
    UnknownLabels(Vec<u32>),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    /// Number of candidate labels (`N_p`); some may own no pixels.
    pub label_count: usize,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>, label_count: usize) -> Self {
        assert_eq!(labels.len(), width * height);
        debug_assert!(labels.iter().all(|&l| (l as usize) < label_count));
        Self {
            width,
            height,
            labels,
            label_count,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.label_count];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    /// Labels that own at least one pixel, ascending.
    pub fn present_labels(&self) -> BTreeSet<u32> {
        self.areas()
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0)
            .map(|(l, _)| l as u32)
            .collect()
    }

    /// Labels suppressed everywhere by NMS.
    pub fn empty_labels(&self) -> Vec<u32> {
        self.areas()
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == 0)
            .map(|(l, _)| l as u32)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: u32,
    pub area: usize,
    /// `(min_x, min_y, max_x, max_y)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self::new(self.width, self.height, self.bits.iter().map(|b| !b).collect())
    }

    /// Pixels in the mask with a 4-neighbor outside it or on the image edge.
    pub fn boundary(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut bits = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
                bits[y * w + x] = edge
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
            }
        }
        Self::new(w, h, bits)
    }
}

/// Per-pixel argmax over upsampled proposals; ties go to the lowest index.
pub fn nms_mask(
    proposals: &ProposalSet,
    out_w: usize,
    out_h: usize,
) -> Result<(LabelMask, ConfidenceMap), MaskError> {
    if proposals.is_empty() {
        return Err(MaskError::EmptyProposals);
    }
    let side = proposals.side;
    if out_w < side || out_h < side {
        return Err(MaskError::OutputTooSmall {
            width: out_w,
            height: out_h,
            side,
        });
    }
    let pixels = out_w * out_h;
    let mut best = vec![f64::NEG_INFINITY; pixels];
    let mut labels = vec![0u32; pixels];
    let mut up = vec![0.0f64; pixels];
    let mut resampler = Resampler::new(side, side, out_h, out_w);
    for (index, p) in proposals.proposals.iter().enumerate() {
        resampler.resample_into(&p.map, &mut up);
        for ((b, l), &v) in best.iter_mut().zip(labels.iter_mut()).zip(&up) {
            if v > *b {
                *b = v;
                *l = index as u32;
            }
        }
    }
    let global = best.iter().copied().fold(0.0f64, f64::max);
    let values = if global > 0.0 {
        best.iter().map(|v| (v / global).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; pixels]
    };
    Ok((
        LabelMask::new(out_w, out_h, labels, proposals.len()),
        ConfidenceMap {
            width: out_w,
            height: out_h,
            values,
        },
    ))
}

/// One region per non-empty label, largest first.
pub fn extract_regions(mask: &LabelMask, confidence: &ConfidenceMap) -> Vec<Region> {
    struct Acc {
        area: usize,
        bbox: (usize, usize, usize, usize),
        conf: f64,
    }
    let mut acc: BTreeMap<u32, Acc> = BTreeMap::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let idx = y * mask.width + x;
            let c = confidence.values[idx];
            let e = acc.entry(mask.labels[idx]).or_insert(Acc {
                area: 0,
                bbox: (x, y, x, y),
                conf: 0.0,
            });
            e.area += 1;
            e.bbox.0 = e.bbox.0.min(x);
            e.bbox.1 = e.bbox.1.min(y);
            e.bbox.2 = e.bbox.2.max(x);
            e.bbox.3 = e.bbox.3.max(y);
            e.conf += c;
        }
    }
    let mut regions: Vec<Region> = acc
        .into_iter()
        .map(|(id, a)| Region {
            id,
            area: a.area,
            bbox: a.bbox,
            mean_confidence: a.conf / a.area as f64,
        })
        .collect();
    regions.sort_by(|a, b| b.area.cmp(&a.area).then(a.id.cmp(&b.id)));
    regions
}

pub fn select_regions(mask: &LabelMask, ids: &BTreeSet<u32>) -> Result<BinaryMask, MaskError> {
    let present = mask.present_labels();
    let unknown: Vec<u32> = ids.difference(&present).copied().collect();
    if !unknown.is_empty() {
        return Err(MaskError::UnknownLabels(unknown));
    }
    Ok(BinaryMask::new(
        mask.width,
        mask.height,
        mask.labels.iter().map(|l| ids.contains(l)).collect(),
    ))
}

/// Splits every label into its 4-connected components, numbered in scan order.
pub fn split_components(mask: &LabelMask) -> LabelMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = vec![u32::MAX; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if out[start] != u32::MAX {
            continue;
        }
        let label = mask.labels[start];
        out[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if out[q] == u32::MAX && mask.labels[q] == label {
                    out[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        next += 1;
    }
    LabelMask::new(w, h, out, next as usize)
}

/// Paints ground-truth boundaries red, then predicted boundaries green.
pub fn render_overlay(
    base: &RgbImage,
    gt: Option<&BinaryMask>,
    pred: &BinaryMask,
) -> Result<RgbImage, MaskError> {
    let (w, h) = (base.width() as usize, base.height() as usize);
    let check = |m: &BinaryMask, what: &str| {
        if (m.width, m.height) != (w, h) {
            Err(MaskError::DimensionMismatch(format!(
                "{what} mask is {}x{}, image is {w}x{h}",
                m.width, m.height
            )))
        } else {
            Ok(())
        }
    };
    check(pred, "predicted")?;
    if let Some(g) = gt {
        check(g, "ground-truth")?;
    }
    let mut out = base.clone();
    let mut paint = |m: &BinaryMask, color: [u8; 3]| {
        let b = m.boundary();
        for y in 0..h {
            for x in 0..w {
                if b.get(x, y) {
                    out.put_pixel(x as u32, y as u32, image::Rgb(color));
                }
            }
        }
    };
    if let Some(g) = gt {
        paint(g, GT_COLOR);
    }
    paint(pred, PRED_COLOR);
    Ok(out)
}
