use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use attnmask::aggregation::WeightMode;
use attnmask::archive::{read_records, ArchiveError, Payload};
use attnmask::guidance::GuidanceMode;
use attnmask::pipeline::{
    evaluate_directories, run_benchmark, run_pipeline, ExtractorSlot, PipelineInput, RunConfig,
    RunOptions, Selection, EXTRACTOR_ENV,
};
use attnmask::service::{serve, ServiceConfig, DEFAULT_MAX_UPLOAD};

#[derive(Parser)]
#[command(name = "attnmask", version, about = "Zero-shot segmentation from diffusion self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image or capture archive.
    Segment(Box<SegmentArgs>),
    /// Run the pipeline over a dataset and score it.
    Benchmark(BenchmarkArgs),
    /// Score existing prediction masks against ground truth.
    Eval(EvalArgs),
    /// Check an ATNP archive and print its layer census.
    Validate(ValidateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SegmentArgs {
    /// Raster image or ATNP archive (detected by magic bytes).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    timestep: Option<u32>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    weights: Option<WeightMode>,
    /// none, top1, ratio:<rho> or oracle-best-region.
    #[arg(long)]
    select: Option<Selection>,
    #[arg(long, value_parser = parse_guidance)]
    guidance: Option<GuidanceMode>,
    /// Comma-separated token positions used for relevance.
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    /// Ground-truth mask; enables metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Base raster for overlays when the input is an archive.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Output size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Relabel disconnected parts of a label as separate regions.
    #[arg(long)]
    split_components: bool,
    #[arg(long)]
    persist_aggregated: bool,
    /// Extractor command template.
    #[arg(long)]
    extractor: Option<String>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    archive: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value = "attnmask-data")]
    data_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD)]
    max_upload_bytes: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((p(w)?, p(h)?))
}

fn parse_guidance(s: &str) -> Result<GuidanceMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected rank or anchor-weighting, got '{s}'"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Ok(t) = std::env::var(EXTRACTOR_ENV) {
        if !t.trim().is_empty() {
            config.extractor = Some(t);
        }
    }
    Ok(config)
}

fn segment(args: SegmentArgs) -> Result<ExitCode> {
    let mut c = load_config(args.config.as_deref())?;
    if let Some(v) = args.extractor {
        c.extractor = Some(v);
    }
    if let Some(v) = args.prompt {
        c.prompt = v;
    }
    if let Some(v) = args.timestep {
        c.timestep = v;
    }
    if let Some(v) = args.target {
        c.target = v;
    }
    if let Some(v) = args.grid {
        c.merge.grid = v;
    }
    if let Some(v) = args.tau {
        c.merge.tau = v;
    }
    if let Some(v) = args.iters {
        c.merge.iterations = v;
    }
    if let Some(v) = args.weights {
        c.weights = v;
    }
    if let Some(v) = args.select {
        c.selection = v;
    }
    if let Some(v) = args.guidance {
        c.guidance = v;
    }
    if args.tokens.is_some() {
        c.tokens = args.tokens;
    }
    c.split_components |= args.split_components;
    c.persist_aggregated |= args.persist_aggregated;

    let input = PipelineInput::detect(&args.input)?;
    let options = RunOptions {
        ground_truth: args.gt,
        base_image: args.image,
        output_size: args.size,
    };
    let outcome = run_pipeline(&c, &input, &options, &args.out, &ExtractorSlot::new())?;
    let seg = &outcome.segmentation;
    println!("run {}", outcome.manifest.run_id);
    println!(
        "{} proposals, {} non-empty regions, {}x{} labels",
        seg.proposals.len(),
        seg.regions.len(),
        seg.labels.width,
        seg.labels.height
    );
    if let Some(sel) = &outcome.selection {
        println!("selected labels {:?}", sel.labels);
        if let Some(m) = &sel.metrics {
            println!(
                "IoU {:.2}  Precision {:.2}  Recall {:.2}  DSC {:.2}",
                m.iou, m.precision, m.recall, m.dsc
            );
        }
    }
    println!("artifacts in {}", outcome.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn benchmark(args: BenchmarkArgs) -> Result<ExitCode> {
    let c = load_config(args.config.as_deref())?;
    let report = run_benchmark(&c, &args.dataset, &args.out, args.workers, &ExtractorSlot::new())?;
    let report_txt = std::fs::read_to_string(args.out.join("report.txt"))?;
    print!("{report_txt}");
    for s in report.missing.iter().chain(&report.failures) {
        eprintln!("skipped {}: {}", s.id, s.reason);
    }
    let skipped = report.missing.len() + report.failures.len();
    if skipped > 0 {
        eprintln!("{skipped} image(s) skipped");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let report = evaluate_directories(&args.pred, &args.gt, &args.out)?;
    print!("{}", std::fs::read_to_string(args.out.join("report.txt"))?);
    for s in report.missing.iter().chain(&report.failures) {
        eprintln!("skipped {}: {}", s.id, s.reason);
    }
    if report.result.is_none() {
        bail!("no prediction/ground-truth pairs could be scored");
    }
    let skipped = report.missing.len() + report.failures.len();
    Ok(if skipped > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn validate(args: ValidateArgs) -> Result<ExitCode> {
    let file = std::fs::File::open(&args.archive)
        .with_context(|| format!("opening {}", args.archive.display()))?;
    let records = match read_records(std::io::BufReader::new(file)) {
        Ok(r) => r,
        Err(e) => {
            println!("INVALID ({}): {e}", e.class());
            return Ok(ExitCode::FAILURE);
        }
    };
    for r in &records {
        match &r.payload {
            Payload::F32 { dims, .. } => println!("{:<12} f32  {:?}", r.name, dims),
            Payload::Json(b) => println!("{:<12} json {} bytes", r.name, b.len()),
        }
    }
    match attnmask::archive::read_archive_file(&args.archive) {
        Ok(stack) => {
            let census: Vec<String> = stack
                .census()
                .iter()
                .rev()
                .map(|(side, n)| format!("{side}:{n}"))
                .collect();
            println!(
                "OK: {} self-attention layers {{{}}}, cross-attention {}, t={}",
                stack.self_attention.len(),
                census.join(", "),
                if stack.has_cross_attention() { "yes" } else { "no" },
                stack.metadata.timestep
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(ArchiveError::Invariant(violations)) => {
            println!("INVALID: {} violation(s)", violations.len());
            for v in &violations {
                println!("  {v}");
            }
            Ok(ExitCode::FAILURE)
        }
        Err(e) => {
            println!("INVALID ({}): {e}", e.class());
            Ok(ExitCode::FAILURE)
        }
    }
}

fn serve_cmd(args: ServeArgs) -> Result<ExitCode> {
    let mut config = ServiceConfig::new(args.data_dir);
    config.base_config = load_config(args.config.as_deref())?;
    config.base_config.validate()?;
    config.max_upload_bytes = args.max_upload_bytes;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(args.addr, config))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match Cli::parse().command {
        Command::Segment(a) => segment(*a),
        Command::Benchmark(a) => benchmark(a),
        Command::Eval(a) => eval(a),
        Command::Validate(a) => validate(a),
        Command::Serve(a) => serve_cmd(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
