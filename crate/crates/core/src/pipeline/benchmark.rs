use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    io_err, pretty, run_pipeline, ExtractorSlot, PipelineError, PipelineInput, RunConfig,
    RunOptions, OVERLAY_FILE,
};
use crate::metrics::{evaluate_image, render_table, summarize, DatasetEvalResult, ImageEval, SelectionMode};
use crate::raster;

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One benchmark item: `masks/<id>.png` plus an image and/or a capture.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub mask: PathBuf,
    pub image: Option<PathBuf>,
    pub archive: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub selection_mode: String,
    pub config: RunConfig,
    #[serde(flatten)]
    pub result: Option<DatasetEvalResult>,
    pub missing: Vec<Skipped>,
    pub failures: Vec<Skipped>,
}

impl BenchmarkReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.failures.is_empty()
    }
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
        if let (Some(ext), Some(stem)) = (ext, stem) {
            if exts.contains(&ext.as_str()) {
                // png wins over jpg when both exist, independent of listing order
                out.entry(stem)
                    .and_modify(|p: &mut PathBuf| {
                        if ext == "png" {
                            *p = path.clone();
                        }
                    })
                    .or_insert(path);
            }
        }
    }
    Ok(out)
}

/// Scans `images/`, `masks/` and `archives/` under `root`, sorted by id.
pub fn discover_dataset(root: &Path) -> Result<(Vec<DatasetEntry>, Vec<Skipped>), PipelineError> {
    let masks_dir = root.join("masks");
    if !masks_dir.is_dir() {
        return Err(PipelineError::Io {
            path: masks_dir,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset has no masks/ directory"),
        });
    }
    let masks = stems(&masks_dir, &["png"])?;
    let images = stems(&root.join("images"), &IMAGE_EXTS)?;
    let archives = stems(&root.join("archives"), &["atnp"])?;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (id, mask) in masks {
        let image = images.get(&id).cloned();
        let archive = archives.get(&id).cloned();
        if image.is_none() && archive.is_none() {
            skipped.push(Skipped {
                id,
                reason: "missing image".into(),
            });
        } else {
            entries.push(DatasetEntry { id, mask, image, archive });
        }
    }
    Ok((entries, skipped))
}

fn run_entry(
    config: &RunConfig,
    entry: &DatasetEntry,
    out_dir: &Path,
    slot: &ExtractorSlot,
) -> Result<ImageEval, PipelineError> {
    let input = match (&entry.archive, &entry.image) {
        (Some(a), _) => PipelineInput::Archive(a.clone()),
        (None, Some(i)) => PipelineInput::Image(i.clone()),
        (None, None) => unreachable!("filtered during discovery"),
    };
    let run_dir = out_dir.join("runs").join(&entry.id);
    let options = RunOptions {
        ground_truth: Some(entry.mask.clone()),
        base_image: entry.image.clone(),
        output_size: None,
    };
    let outcome = run_pipeline(config, &input, &options, &run_dir, slot)?;
    let overlay = run_dir.join(OVERLAY_FILE);
    if overlay.exists() {
        let dest = out_dir.join("overlays").join(format!("{}.png", entry.id));
        fs::copy(&overlay, &dest).map_err(io_err(&dest))?;
    }
    let counts = outcome
        .selection
        .and_then(|s| s.counts)
        .expect("ground truth and selection are set");
    let mode = config.selection.mode().expect("checked by caller");
    Ok(ImageEval {
        id: entry.id.clone(),
        counts,
        metrics: crate::metrics::compute_metrics(counts),
        selection: mode.label(),
    })
}

/// Runs the pipeline over a dataset and writes `report.json`, `report.txt`
/// and `overlays/`. Per-image failures are reported, not fatal.
pub fn run_benchmark(
    config: &RunConfig,
    root: &Path,
    out_dir: &Path,
    workers: usize,
    slot: &ExtractorSlot,
) -> Result<BenchmarkReport, PipelineError> {
    config.validate()?;
    let mode = config.selection.mode().ok_or(PipelineError::Config {
        field: "selection",
        detail: "a benchmark needs a selection (top1, ratio:<rho> or oracle-best-region)".into(),
    })?;
    let (entries, missing) = discover_dataset(root)?;
    for dir in [out_dir.to_path_buf(), out_dir.join("overlays"), out_dir.join("runs")] {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<(String, Result<ImageEval, PipelineError>)> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| (e.id.clone(), run_entry(config, e, out_dir, slot)))
            .collect()
    });

    let mut evals = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(e) => evals.push(e),
            Err(err) => {
                tracing::warn!(%id, error = %err, "benchmark item failed");
                failures.push(Skipped {
                    id,
                    reason: err.to_string(),
                })
            }
        }
    }
    let result = if evals.is_empty() {
        None
    } else {
        Some(summarize(evals)?)
    };
    let report = BenchmarkReport {
        selection_mode: mode.label(),
        config: config.clone(),
        result,
        missing,
        failures,
    };
    write_reports(out_dir, &report, report.result.as_ref())?;
    Ok(report)
}

fn write_reports<T: Serialize>(
    out_dir: &Path,
    json: &T,
    result: Option<&DatasetEvalResult>,
) -> Result<(), PipelineError> {
    let path = out_dir.join("report.json");
    fs::write(&path, pretty(json)).map_err(io_err(&path))?;
    let path = out_dir.join("report.txt");
    let table = result.map(render_table).unwrap_or_else(|| "no images evaluated\n".into());
    fs::write(&path, table).map_err(io_err(&path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub selection_mode: String,
    #[serde(flatten)]
    pub result: Option<DatasetEvalResult>,
    pub missing: Vec<Skipped>,
    pub failures: Vec<Skipped>,
}

/// Scores prediction PNGs in `pred` against same-named masks in `gt`.
pub fn evaluate_directories(pred: &Path, gt: &Path, out_dir: &Path) -> Result<EvalReport, PipelineError> {
    let preds = stems(pred, &["png"])?;
    let gts = stems(gt, &["png"])?;
    let mut evals = Vec::new();
    let mut missing = Vec::new();
    let mut failures = Vec::new();
    let label = SelectionMode::Fixed.label();
    for (id, gt_path) in &gts {
        let Some(pred_path) = preds.get(id) else {
            missing.push(Skipped {
                id: id.clone(),
                reason: "missing prediction".into(),
            });
            continue;
        };
        let scored = raster::load_binary_mask(pred_path)
            .and_then(|p| Ok((p, raster::load_binary_mask(gt_path)?)))
            .map_err(PipelineError::from)
            .and_then(|(p, g)| Ok(evaluate_image(id, &p, &g, &label)?));
        match scored {
            Ok(e) => evals.push(e),
            Err(e) => failures.push(Skipped {
                id: id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    for id in preds.keys().filter(|k| !gts.contains_key(*k)) {
        missing.push(Skipped {
            id: id.clone(),
            reason: "missing ground truth".into(),
        });
    }
    let result = if evals.is_empty() { None } else { Some(summarize(evals)?) };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let report = EvalReport {
        selection_mode: label,
        result,
        missing,
        failures,
    };
    write_reports(out_dir, &report, report.result.as_ref())?;
    Ok(report)
}
