//! Overlap metrics (DSC, IoU, precision, recall) and dataset aggregation.
//!
//! All percentages come from an exact integer ratio converted to `f64` once.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::SelectionPolicy;
use crate::masking::{BinaryMask, LabelMask};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask dimensions differ for '{id}': prediction {pred:?}, ground truth {gt:?}")]
    DimensionMismatch {
        id: String,
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("no image pairs to evaluate")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merged(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    /// Prediction and ground truth exchanged.
    pub fn swapped(self) -> Self {
        Self {
            tp: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tn,
        }
    }
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub dsc: f64,
    /// Set when prediction and ground truth are both empty.
    pub degenerate: bool,
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    confusion_counts_for("", pred, gt)
}

fn confusion_counts_for(id: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(MetricsError::DimensionMismatch {
            id: id.to_string(),
            pred: (pred.width, pred.height),
            gt: (gt.width, gt.height),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `100 * num / den`, or 0 for an empty denominator.
fn percent(num: u64, den: u64) -> f64 {
    if den == 0 {
        return 0.0;
    }
    let scaled = u128::from(num) * 100;
    scaled as f64 / den as f64
}

pub fn compute_metrics(c: ConfusionCounts) -> MetricReport {
    if c.tp + c.fp + c.fn_ == 0 {
        return MetricReport {
            iou: 100.0,
            precision: 100.0,
            recall: 100.0,
            dsc: 100.0,
            degenerate: true,
        };
    }
    MetricReport {
        iou: percent(c.tp, c.tp + c.fp + c.fn_),
        precision: percent(c.tp, c.tp + c.fp),
        recall: percent(c.tp, c.tp + c.fn_),
        dsc: percent(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        degenerate: false,
    }
}

/// How one binary prediction is derived from a multi-region segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Prediction masks supplied as-is.
    Fixed,
    /// Regions chosen from text relevance.
    Guided { policy: SelectionPolicy },
    /// Regions chosen to maximize DSC against ground truth. An upper bound.
    OracleBestRegion,
}

impl SelectionMode {
    pub fn label(&self) -> String {
        match self {
            SelectionMode::Fixed => "fixed".into(),
            SelectionMode::Guided { policy } => format!("guided:{policy}"),
            SelectionMode::OracleBestRegion => "oracle-best-region (upper bound)".into(),
        }
    }
}

/// Greedy forward selection of labels maximizing DSC; ties go to the lower label.
pub fn oracle_best_regions(mask: &LabelMask, gt: &BinaryMask) -> Result<BTreeSet<u32>, MetricsError> {
    if (mask.width, mask.height) != (gt.width, gt.height) {
        return Err(MetricsError::DimensionMismatch {
            id: String::new(),
            pred: (mask.width, mask.height),
            gt: (gt.width, gt.height),
        });
    }
    let mut area = vec![0u64; mask.label_count];
    let mut hits = vec![0u64; mask.label_count];
    for (&l, &g) in mask.labels.iter().zip(&gt.bits) {
        area[l as usize] += 1;
        if g {
            hits[l as usize] += 1;
        }
    }
    let positives = gt.count() as u64;
    // DSC as an exact fraction 2TP / (2TP + FP + FN)
    let dsc = |tp: u64, selected_area: u64| -> (u64, u64) {
        let fp = selected_area - tp;
        let fn_ = positives - tp;
        (2 * tp, 2 * tp + fp + fn_)
    };
    let better = |a: (u64, u64), b: (u64, u64)| -> bool {
        // a > b, treating 0/0 as 1
        let norm = |(n, d): (u64, u64)| if d == 0 { (1, 1) } else { (n, d) };
        let (an, ad) = norm(a);
        let (bn, bd) = norm(b);
        u128::from(an) * u128::from(bd) > u128::from(bn) * u128::from(ad)
    };

    let mut chosen = BTreeSet::new();
    let (mut tp, mut sel_area) = (0u64, 0u64);
    loop {
        let current = dsc(tp, sel_area);
        let mut best: Option<(u32, (u64, u64))> = None;
        for l in 0..mask.label_count {
            if area[l] == 0 || chosen.contains(&(l as u32)) {
                continue;
            }
            let cand = dsc(tp + hits[l], sel_area + area[l]);
            if better(cand, current) && best.is_none_or(|(_, b)| better(cand, b)) {
                best = Some((l as u32, cand));
            }
        }
        match best {
            Some((l, _)) => {
                chosen.insert(l);
                tp += hits[l as usize];
                sel_area += area[l as usize];
            }
            None => return Ok(chosen),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricReport,
    pub selection: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvalResult {
    pub per_image: Vec<ImageEval>,
    pub mean: MetricSummary,
    pub median: MetricSummary,
    /// Metrics of the dataset-wide pooled confusion counts.
    pub micro: MetricReport,
    pub degenerate_images: usize,
}

/// Lower of the two middle values for even counts.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Aggregates per-image results; order of the input does not matter.
pub fn summarize(mut per_image: Vec<ImageEval>) -> Result<DatasetEvalResult, MetricsError> {
    if per_image.is_empty() {
        return Err(MetricsError::Empty);
    }
    per_image.sort_by(|a, b| a.id.cmp(&b.id));
    let n = per_image.len() as f64;
    let column = |f: fn(&MetricReport) -> f64| -> Vec<f64> { per_image.iter().map(|e| f(&e.metrics)).collect() };
    let cols = [
        column(|m| m.iou),
        column(|m| m.precision),
        column(|m| m.recall),
        column(|m| m.dsc),
    ];
    let mean = |c: &Vec<f64>| c.iter().sum::<f64>() / n;
    let pooled = per_image
        .iter()
        .fold(ConfusionCounts::default(), |acc, e| acc.merged(e.counts));
    Ok(DatasetEvalResult {
        mean: MetricSummary {
            iou: mean(&cols[0]),
            precision: mean(&cols[1]),
            recall: mean(&cols[2]),
            dsc: mean(&cols[3]),
        },
        median: MetricSummary {
            iou: lower_median(&cols[0]),
            precision: lower_median(&cols[1]),
            recall: lower_median(&cols[2]),
            dsc: lower_median(&cols[3]),
        },
        micro: compute_metrics(pooled),
        degenerate_images: per_image.iter().filter(|e| e.metrics.degenerate).count(),
        per_image,
    })
}

pub fn evaluate_image(id: &str, pred: &BinaryMask, gt: &BinaryMask, selection: &str) -> Result<ImageEval, MetricsError> {
    let counts = confusion_counts_for(id, pred, gt)?;
    Ok(ImageEval {
        id: id.to_string(),
        counts,
        metrics: compute_metrics(counts),
        selection: selection.to_string(),
    })
}

/// Scores `(pred, gt, id)` pairs and aggregates them.
pub fn evaluate_dataset(
    pairs: &[(BinaryMask, BinaryMask, String)],
    mode: SelectionMode,
) -> Result<DatasetEvalResult, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let label = mode.label();
    let per_image = pairs
        .iter()
        .map(|(p, g, id)| evaluate_image(id, p, g, &label))
        .collect::<Result<Vec<_>, _>>()?;
    summarize(per_image)
}

/// Text table with columns in the order IoU, Precision, Recall, DSC.
pub fn render_table(result: &DatasetEvalResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>9} {:>13} {:>10} {:>9}",
        "Image", "IoU (%)", "Precision (%)", "Recall (%)", "DSC (%)"
    );
    let row = |out: &mut String, name: &str, iou: f64, p: f64, r: f64, d: f64| {
        let _ = writeln!(out, "{name:<24} {iou:>9.2} {p:>13.2} {r:>10.2} {d:>9.2}");
    };
    for e in &result.per_image {
        let m = &e.metrics;
        let name = if m.degenerate {
            format!("{} *", e.id)
        } else {
            e.id.clone()
        };
        row(&mut out, &name, m.iou, m.precision, m.recall, m.dsc);
    }
    let _ = writeln!(out, "{}", "-".repeat(69));
    let s = &result.mean;
    row(&mut out, "mean", s.iou, s.precision, s.recall, s.dsc);
    let s = &result.median;
    row(&mut out, "median", s.iou, s.precision, s.recall, s.dsc);
    let m = &result.micro;
    row(&mut out, "micro (pooled)", m.iou, m.precision, m.recall, m.dsc);
    if result.degenerate_images > 0 {
        let _ = writeln!(
            out,
            "* {} image(s) with empty prediction and ground truth scored 100",
            result.degenerate_images
        );
    }
    out
}
