//! Zero-shot segmentation from diffusion self-attention.
//!
//! A capture of per-layer self-attention maps (an ATNP archive) is aggregated
//! to a common resolution, merged into object proposals by symmetric KL
//! distance, and turned into a label mask by per-pixel argmax. Cross-attention,
//! when captured, ranks regions against the prompt.

pub mod aggregation;
pub mod archive;
pub mod guidance;
pub mod interp;
pub mod masking;
pub mod merging;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod service;
pub mod stack;

pub use aggregation::{aggregate_stack, compute_weights, AggregatedTensor, WeightMode, WeightVector};
pub use archive::{read_archive, read_archive_file, write_archive, write_archive_file, ArchiveError};
pub use guidance::{auto_select, build_relevance_map, score_regions, GuidanceMode, SelectionPolicy};
pub use masking::{nms_mask, BinaryMask, ConfidenceMap, LabelMask, Region};
pub use merging::{kl_distance, merge, MergeParams, ProposalSet};
pub use metrics::{compute_metrics, confusion_counts, ConfusionCounts, MetricReport};
pub use pipeline::{run_pipeline, PipelineError, PipelineInput, RunConfig, RunOptions};
pub use stack::{validate_stack, AttentionStack, AttentionTensor, CaptureMetadata, Resolution};
