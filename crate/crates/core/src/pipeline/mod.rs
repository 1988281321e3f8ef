//! End-to-end orchestration from capture to persisted masks.

mod benchmark;
mod config;
mod extractor;
mod manifest;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::aggregation::{aggregate_stack, compute_weights, AggregatedTensor, AggregationError};
use crate::archive::{read_archive_file, write_records, ArchiveError, Payload, Record, MAGIC};
use crate::guidance::{
    auto_select, build_relevance_map, score_regions, GuidanceError, GuidanceMode, RelevanceMap,
    TokenSelection,
};
use crate::masking::{
    extract_regions, nms_mask, render_overlay, select_regions, split_components, BinaryMask,
    ConfidenceMap, LabelMask, MaskError, Region,
};
use crate::merging::{merge, MergeError, ProposalSet};
use crate::metrics::{
    compute_metrics, confusion_counts, oracle_best_regions, ConfusionCounts, MetricReport,
    MetricsError,
};
use crate::raster::{self, RasterError};
use crate::stack::AttentionStack;

pub use benchmark::{
    discover_dataset, evaluate_directories, run_benchmark, BenchmarkReport, DatasetEntry,
    EvalReport, Skipped,
};
pub use config::{RunConfig, Selection};
pub use extractor::{
    invoke_extractor, render_command, ExtractorError, ExtractorSlot, EXTRACTOR_ENV, PLACEHOLDERS,
};
pub use manifest::{sha256_file, sha256_hex, ArtifactEntry, RunManifest, MANIFEST_FILE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config field '{field}': {detail}")]
    Config { field: &'static str, detail: String },
    #[error("extractor required: image input needs an extractor command template")]
    ExtractorRequired,
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error("invalid archive: {0}")]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("selection unavailable: {0}")]
    SelectionUnavailable(String),
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What the pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum PipelineInput {
    Archive(PathBuf),
    Image(PathBuf),
}

impl PipelineInput {
    /// Archives are recognized by their magic bytes.
    pub fn detect(path: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        use std::io::Read;
        let path = path.into();
        let mut head = [0u8; 4];
        let mut f = fs::File::open(&path).map_err(io_err(&path))?;
        let n = f.read(&mut head).map_err(io_err(&path))?;
        Ok(if n == 4 && head == MAGIC {
            PipelineInput::Archive(path)
        } else {
            PipelineInput::Image(path)
        })
    }

    pub fn path(&self) -> &Path {
        match self {
            PipelineInput::Archive(p) | PipelineInput::Image(p) => p,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Ground-truth mask; masks are produced at its size.
    pub ground_truth: Option<PathBuf>,
    /// Raster for overlays when the input is an archive.
    pub base_image: Option<PathBuf>,
    /// Explicit output size `(width, height)`.
    pub output_size: Option<(usize, usize)>,
}

/// In-memory result of the segmentation stages.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub proposals: ProposalSet,
    pub labels: LabelMask,
    pub confidence: ConfidenceMap,
    pub regions: Vec<Region>,
    pub relevance: Option<RelevanceMap>,
    pub scores: Option<Vec<(u32, f64)>>,
}

/// Segments a validated stack. Pure and deterministic.
pub fn segment_stack(
    stack: &AttentionStack,
    config: &RunConfig,
    out_w: usize,
    out_h: usize,
) -> Result<(Segmentation, Option<AggregatedTensor>), PipelineError> {
    let weights = compute_weights(&stack.resolutions(), config.weights)?;
    let mut agg = aggregate_stack(stack, &weights, config.target)?;

    let relevance = if stack.has_cross_attention() {
        let tokens = match &config.tokens {
            Some(t) => Some(TokenSelection::new(
                t.iter().copied().collect(),
                &stack.metadata.token_strings,
            )?),
            None => TokenSelection::prompt_tokens(&stack.metadata.token_strings).ok(),
        };
        tokens
            .map(|t| build_relevance_map(stack, &weights, config.target, &t))
            .transpose()?
    } else {
        None
    };

    if config.guidance == GuidanceMode::AnchorWeighting {
        let rel = relevance.as_ref().ok_or_else(|| {
            PipelineError::SelectionUnavailable(
                "anchor weighting needs cross-attention from a prompted capture".into(),
            )
        })?;
        agg = agg.reweighted(&rel.values);
    }

    let proposals = merge(&agg, &config.merge)?;
    let (mut labels, confidence) = nms_mask(&proposals, out_w, out_h)?;
    if config.split_components {
        labels = split_components(&labels);
    }
    let regions = extract_regions(&labels, &confidence);
    let scores = relevance.as_ref().map(|r| score_regions(&labels, r));
    let kept = config.persist_aggregated.then_some(agg);
    Ok((
        Segmentation {
            proposals,
            labels,
            confidence,
            regions,
            relevance,
            scores,
        },
        kept,
    ))
}

/// Regions picked by the configured selection.
pub fn choose_regions(
    config: &RunConfig,
    seg: &Segmentation,
    gt: Option<&BinaryMask>,
) -> Result<Option<BTreeSet<u32>>, PipelineError> {
    match config.selection {
        Selection::None => Ok(None),
        Selection::Policy(policy) => {
            let scores = seg.scores.as_ref().ok_or_else(|| {
                PipelineError::SelectionUnavailable(
                    "guided selection needs cross-attention (capture with a prompt)".into(),
                )
            })?;
            Ok(Some(auto_select(scores, policy)?))
        }
        Selection::OracleBestRegion => {
            let gt = gt.ok_or_else(|| {
                PipelineError::SelectionUnavailable(
                    "oracle-best-region selection needs a ground-truth mask".into(),
                )
            })?;
            Ok(Some(oracle_best_regions(&seg.labels, gt)?))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionOutcome {
    pub labels: Vec<u32>,
    pub counts: Option<ConfusionCounts>,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub segmentation: Segmentation,
    pub selection: Option<SelectionOutcome>,
    pub out_dir: PathBuf,
}

pub const LABELS_FILE: &str = "labels.png";
pub const CONFIDENCE_FILE: &str = "confidence.png";
pub const REGIONS_FILE: &str = "regions.json";
pub const PROPOSALS_FILE: &str = "proposals.atnp";
pub const RELEVANCE_FILE: &str = "relevance.atnp";
pub const AGGREGATED_FILE: &str = "aggregated.atnp";
pub const SELECTION_FILE: &str = "selection.png";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const METRICS_FILE: &str = "metrics.json";
pub const CAPTURE_FILE: &str = "attention.atnp";
pub const WORKING_IMAGE_FILE: &str = "input.png";

/// Runs the whole pipeline and persists every artifact under `out_dir`.
pub fn run_pipeline(
    config: &RunConfig,
    input: &PipelineInput,
    options: &RunOptions,
    out_dir: &Path,
    slot: &ExtractorSlot,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut writer = manifest::ArtifactWriter::new(out_dir);

    let mut inputs = vec![(input_kind(input).to_string(), sha256_file(input.path())?)];
    let gt = match &options.ground_truth {
        Some(p) => {
            inputs.push(("ground_truth".into(), sha256_file(p)?));
            Some(raster::load_binary_mask(p)?)
        }
        None => None,
    };
    let base_path = match input {
        PipelineInput::Image(p) => Some(p.clone()),
        PipelineInput::Archive(_) => options.base_image.clone(),
    };
    if let (Some(p), PipelineInput::Archive(_)) = (&base_path, input) {
        inputs.push(("base_image".into(), sha256_file(p)?));
    }
    let base = base_path.as_ref().map(raster::load_rgb).transpose()?;

    let stack = match input {
        PipelineInput::Archive(p) => read_archive_file(p)?,
        PipelineInput::Image(p) => extract_capture(config, p, out_dir, slot)?.1,
    };
    let capture = out_dir.join(CAPTURE_FILE);
    if matches!(input, PipelineInput::Image(_)) || input.path() == capture {
        for name in [WORKING_IMAGE_FILE, CAPTURE_FILE] {
            if out_dir.join(name).is_file() {
                writer.register(name)?;
            }
        }
    }

    let (out_w, out_h) = options
        .output_size
        .or_else(|| gt.as_ref().map(|g| (g.width, g.height)))
        .or_else(|| {
            base.as_ref()
                .filter(|_| config.native_output)
                .map(|b| (b.width() as usize, b.height() as usize))
        })
        .unwrap_or((config.output_width, config.output_height));

    let (seg, aggregated) = segment_stack(&stack, config, out_w, out_h)?;

    writer.write(LABELS_FILE, &raster::label_mask_png(&seg.labels)?)?;
    writer.write(CONFIDENCE_FILE, &raster::confidence_png(&seg.confidence)?)?;
    writer.write(PROPOSALS_FILE, &proposals_bytes(&seg.proposals)?)?;
    if let Some(rel) = &seg.relevance {
        writer.write(RELEVANCE_FILE, &relevance_bytes(rel)?)?;
    }
    if let Some(agg) = &aggregated {
        writer.write(AGGREGATED_FILE, &aggregated_bytes(agg)?)?;
    }

    let chosen = choose_regions(config, &seg, gt.as_ref())?;
    let selection = match &chosen {
        Some(ids) => {
            let binary = select_regions(&seg.labels, ids)?;
            writer.write(SELECTION_FILE, &raster::binary_mask_png(&binary)?)?;
            let counts = gt.as_ref().map(|g| confusion_counts(&binary, g)).transpose()?;
            if let Some(b) = &base {
                let b = raster::resize_rgb(b, out_w, out_h);
                let overlay = render_overlay(&b, gt.as_ref(), &binary)?;
                writer.write(OVERLAY_FILE, &raster::rgb_png(&overlay)?)?;
            }
            Some(SelectionOutcome {
                labels: ids.iter().copied().collect(),
                counts,
                metrics: counts.map(compute_metrics),
            })
        }
        None => None,
    };
    writer.write(
        REGIONS_FILE,
        &regions_json(&seg, chosen.as_ref().map(|c| c.iter().copied().collect()))?,
    )?;
    if let Some(SelectionOutcome {
        counts: Some(c),
        metrics: Some(m),
        labels,
    }) = &selection
    {
        let body = json!({
            "selection": config.selection.to_string(),
            "labels": labels,
            "counts": c,
            "metrics": m,
        });
        writer.write(METRICS_FILE, &pretty(&body))?;
    }

    let manifest = RunManifest::new(config, inputs, writer.finish(), &stack);
    manifest.save(out_dir)?;
    Ok(RunOutcome {
        manifest,
        segmentation: seg,
        selection,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Resizes `image` to the working size and runs the extractor on it,
/// leaving `input.png` and `attention.atnp` in `out_dir`.
pub fn extract_capture(
    config: &RunConfig,
    image: &Path,
    out_dir: &Path,
    slot: &ExtractorSlot,
) -> Result<(PathBuf, AttentionStack), PipelineError> {
    let template = config
        .extractor
        .as_deref()
        .ok_or(PipelineError::ExtractorRequired)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let src = raster::load_rgb(image)?;
    let working = raster::resize_rgb(&src, config.working_size, config.working_size);
    let working_path = out_dir.join(WORKING_IMAGE_FILE);
    write_rgb(&working_path, &working)?;
    let capture = out_dir.join(CAPTURE_FILE);
    Ok(slot.invoke(template, &working_path, &config.prompt, config.timestep, &capture)?)
}

fn input_kind(input: &PipelineInput) -> &'static str {
    match input {
        PipelineInput::Archive(_) => "archive",
        PipelineInput::Image(_) => "image",
    }
}

pub(crate) fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

/// Region sidecar: per-label stats plus the current selection.
pub fn regions_json(seg: &Segmentation, selected: Option<Vec<u32>>) -> Result<Vec<u8>, PipelineError> {
    let score_of = |id: u32| {
        seg.scores
            .as_ref()
            .and_then(|s| s.iter().find(|(l, _)| *l == id).map(|(_, v)| *v))
    };
    let regions: Vec<_> = seg
        .regions
        .iter()
        .map(|r| {
            json!({
                "id": r.id,
                "area": r.area,
                "bbox": [r.bbox.0, r.bbox.1, r.bbox.2, r.bbox.3],
                "mean_confidence": r.mean_confidence,
                "score": score_of(r.id),
            })
        })
        .collect();
    let body = json!({
        "width": seg.labels.width,
        "height": seg.labels.height,
        "label_count": seg.labels.label_count,
        "empty_labels": seg.labels.empty_labels(),
        "regions": regions,
        "ranking": seg.scores.as_ref().map(|s| s.iter().map(|(l, _)| *l).collect::<Vec<_>>()),
        "selected": selected,
    });
    Ok(pretty(&body))
}

fn f32_record(name: String, dims: Vec<u32>, values: &[f64]) -> Record {
    Record {
        name,
        payload: Payload::F32 {
            dims,
            data: values.iter().map(|&v| v as f32).collect(),
        },
    }
}

fn container_bytes(records: &[Record]) -> Result<Vec<u8>, PipelineError> {
    let mut out = Vec::new();
    write_records(records, &mut out)?;
    Ok(out)
}

/// Proposals as `proposal/NNN` records plus member/provenance metadata.
pub fn proposals_bytes(set: &ProposalSet) -> Result<Vec<u8>, PipelineError> {
    let side = set.side as u32;
    let mut records: Vec<Record> = set
        .proposals
        .iter()
        .enumerate()
        .map(|(i, p)| f32_record(format!("proposal/{i:03}"), vec![side, side], &p.map))
        .collect();
    let meta = json!({
        "kind": "proposals",
        "params": set.params,
        "members": set.proposals.iter().map(|p| p.members).collect::<Vec<_>>(),
        "provenance": set.proposals.iter().map(|p| &p.provenance).collect::<Vec<_>>(),
    });
    records.push(Record {
        name: "meta".into(),
        payload: Payload::Json(serde_json::to_vec(&meta).expect("json")),
    });
    container_bytes(&records)
}

fn relevance_bytes(rel: &RelevanceMap) -> Result<Vec<u8>, PipelineError> {
    let side = rel.side as u32;
    container_bytes(&[
        f32_record("relevance".into(), vec![side, side], &rel.values),
        Record {
            name: "meta".into(),
            payload: Payload::Json(br#"{"kind":"relevance"}"#.to_vec()),
        },
    ])
}

fn aggregated_bytes(agg: &AggregatedTensor) -> Result<Vec<u8>, PipelineError> {
    let s = agg.side() as u32;
    container_bytes(&[
        f32_record("aggregated".into(), vec![s, s, s, s], agg.data()),
        Record {
            name: "meta".into(),
            payload: Payload::Json(br#"{"kind":"aggregated"}"#.to_vec()),
        },
    ])
}

/// Loads a run's persisted label mask (for later selections).
pub fn load_run_labels(out_dir: &Path, label_count: usize) -> Result<LabelMask, PipelineError> {
    Ok(raster::load_label_mask(out_dir.join(LABELS_FILE), label_count)?)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), PipelineError> {
    fs::write(path, raster::rgb_png(img)?).map_err(io_err(path))
}
