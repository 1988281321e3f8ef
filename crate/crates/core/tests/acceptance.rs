//! Acceptance gate: one pass/fail line per criterion, each checked at its
//! stated tolerance and time budget. Runs without the libtest harness so the
//! report lines are always printed.

mod oracle;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use attnmask::aggregation::{aggregate_stack, compute_weights, AggregatedTensor, WeightMode};
use attnmask::archive::{read_archive, write_archive};
use attnmask::interp::resize_bilinear;
use attnmask::masking::{nms_mask, BinaryMask};
use attnmask::merging::{
    kl_distance, merge_first_pass, merge_refine, sample_anchors, Averaging, MergeParams, Proposal,
    ProposalSet, DEFAULT_EPSILON,
};
use attnmask::metrics::{compute_metrics, ConfusionCounts};
use attnmask::pipeline::{
    evaluate_directories, run_pipeline, ExtractorSlot, PipelineInput, RunConfig, RunOptions,
    CONFIDENCE_FILE, LABELS_FILE,
};
use attnmask::raster::binary_mask_png;
use oracle::{rng, RefProposal};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn metrics_identities() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = ConfusionCounts::new(
            r.random_range(0..100_000),
            r.random_range(0..100_000),
            r.random_range(0..100_000),
            r.random_range(0..100_000),
        );
        let m = compute_metrics(c);
        let iou = m.iou / 100.0;
        let err = (m.dsc / 100.0 - 2.0 * iou / (1.0 + iou)).abs();
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("DSC identity off by {err:e} for {c:?}"))?;
    }
    let m = compute_metrics(ConfusionCounts::new(2, 2, 2, 0));
    let two = |v: f64| format!("{v:.2}");
    let got = [two(m.iou), two(m.precision), two(m.recall), two(m.dsc)];
    ensure(got == ["33.33", "50.00", "50.00", "50.00"], || format!("hand example gave {got:?}"))?;
    Ok(format!("1000 random counts, worst DSC identity error {worst:.1e}; TP=FP=FN=2 -> 33.33/50.00/50.00/50.00"))
}

fn kl_oracle() -> Outcome {
    let d = kl_distance(&[0.5, 0.5], &[0.9, 0.1], DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    ensure((d - 0.43945).abs() <= 1e-4, || format!("D([.5,.5],[.9,.1]) = {d}"))?;
    let mut r = rng(2);
    for _ in 0..1000 {
        let n = r.random_range(1..=64);
        let p = oracle::random_distribution(&mut r, n);
        let q = oracle::random_distribution(&mut r, n);
        let pq = kl_distance(&p, &q, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        let qp = kl_distance(&q, &p, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        let pp = kl_distance(&p, &p, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        ensure(pq == qp, || format!("asymmetric: {pq} vs {qp}"))?;
        ensure(pp.abs() <= 1e-12, || format!("D(p,p) = {pp}"))?;
        ensure(pq >= 0.0, || format!("negative distance {pq}"))?;
    }
    Ok(format!("D = {d:.6}; 1000 pairs symmetric with D(p,p)=0"))
}

fn aggregation_oracle() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    for case in 0..200 {
        let (stack, target) = oracle::random_stack(&mut r, 8, 4);
        let weights = compute_weights(&stack.resolutions(), WeightMode::Proportional).map_err(|e| e.to_string())?;
        let sides: Vec<usize> = stack.resolutions().iter().map(|s| s.side()).collect();
        let ref_w = oracle::proportional_weights(&sides);
        for (a, b) in weights.as_slice().iter().zip(&ref_w) {
            ensure((a - b).abs() <= 1e-15, || format!("case {case}: weight {a} vs {b}"))?;
        }
        let agg = aggregate_stack(&stack, &weights, target).map_err(|e| e.to_string())?;
        let expected = oracle::aggregate(&stack, &ref_w, target);
        for (i, (a, b)) in agg.data().iter().zip(&expected).enumerate() {
            let err = (a - b).abs();
            worst = worst.max(err);
            ensure(err <= 1e-9, || format!("case {case}, element {i}: {a} vs {b}"))?;
        }
        for m in 0..agg.map_count() {
            let s: f64 = agg.map_at(m).iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            ensure((s - 1.0).abs() <= 1e-5, || format!("case {case}, map {m} sums to {s}"))?;
        }
    }
    Ok(format!("200 stacks, max |A_f - oracle| {worst:.1e}, max |sum - 1| {worst_sum:.1e}"))
}

fn compare_proposals(case: usize, got: &[Proposal], want: &[RefProposal]) -> Result<f64, String> {
    ensure(got.len() == want.len(), || format!("case {case}: {} proposals vs {}", got.len(), want.len()))?;
    let mut worst = 0.0f64;
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        ensure(g.provenance == w.provenance, || {
            format!("case {case}, proposal {k}: provenance {:?} vs {:?}", g.provenance, w.provenance)
        })?;
        ensure(g.members == w.members, || format!("case {case}, proposal {k}: members {} vs {}", g.members, w.members))?;
        for (a, b) in g.map.iter().zip(&w.map) {
            worst = worst.max((a - b).abs());
            ensure((a - b).abs() <= 1e-9, || format!("case {case}, proposal {k}: {a} vs {b}"))?;
        }
    }
    Ok(worst)
}

fn merging_oracle() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let (mut merges, mut total_props) = (0usize, 0usize);
    for case in 0..200 {
        let side = [1usize, 2, 4, 8][r.random_range(0..4)];
        let grid = r.random_range(1..=side.min(4));
        let tau = 10f64.powf(r.random_range(-2.0..0.5));
        let iterations = r.random_range(1..=4);
        let agg = AggregatedTensor::from_raw(side, oracle::clustered_maps(&mut r, side)).expect("dims");
        let params = MergeParams {
            grid,
            tau,
            iterations,
            epsilon: DEFAULT_EPSILON,
            averaging: Averaging::Mean,
        };
        let anchors = sample_anchors(&agg, grid).map_err(|e| e.to_string())?;
        let first = merge_first_pass(&agg, &anchors, &params).map_err(|e| e.to_string())?;
        let got = merge_refine(first, tau, iterations, DEFAULT_EPSILON);
        let want = oracle::merge(agg.data(), side, grid, tau, iterations, DEFAULT_EPSILON);
        worst = worst.max(compare_proposals(case, &got.proposals, &want)?);
        merges += grid * grid - got.len();
        total_props += got.len();
    }
    Ok(format!(
        "200 cases, {total_props} proposals ({merges} absorbed by refinement), max value error {worst:.1e}"
    ))
}

fn nms_check() -> Outcome {
    let mut r = rng(5);
    let mut pixels = 0usize;
    for case in 0..300 {
        let side = [1usize, 2, 4, 8][r.random_range(0..4)];
        let n = r.random_range(1..=6);
        let mut proposals: Vec<Proposal> = Vec::new();
        for k in 0..n {
            let map = if k > 0 && r.random_bool(0.2) {
                proposals[r.random_range(0..k)].map.clone()
            } else {
                oracle::random_distribution(&mut r, side * side)
            };
            proposals.push(Proposal {
                map,
                members: 1,
                provenance: vec![k],
            });
        }
        let set = ProposalSet {
            side,
            proposals,
            params: MergeParams::default(),
        };
        let (w, h) = (r.random_range(side..=side.max(1) * 5), r.random_range(side..=side.max(1) * 5));
        let (labels, conf) = nms_mask(&set, w, h).map_err(|e| e.to_string())?;
        let ups: Vec<Vec<f64>> = set
            .proposals
            .iter()
            .map(|p| resize_bilinear(&p.map, side, side, h, w))
            .collect();
        let refs: Vec<Vec<f64>> = set
            .proposals
            .iter()
            .map(|p| oracle::bilinear(&p.map, side, side, h, w))
            .collect();
        let maxes: Vec<f64> = (0..w * h)
            .map(|px| ups.iter().map(|u| u[px]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let global = maxes.iter().copied().fold(0.0, f64::max);
        for px in 0..w * h {
            let l = labels.labels[px] as usize;
            ensure(ups[l][px] == maxes[px], || format!("case {case}, pixel {px}: label {l} is not the argmax"))?;
            ensure(ups[..l].iter().all(|u| u[px] < maxes[px]), || {
                format!("case {case}, pixel {px}: tie not broken to the lowest index")
            })?;
            let ref_max = refs.iter().map(|u| u[px]).fold(f64::NEG_INFINITY, f64::max);
            ensure(refs[l][px] >= ref_max - 1e-12, || {
                format!("case {case}, pixel {px}: independent bilinear disagrees")
            })?;
            let c = conf.values[px];
            ensure((0.0..=1.0).contains(&c), || format!("case {case}: confidence {c} out of range"))?;
            ensure((c - maxes[px] / global).abs() <= 1e-12, || format!("case {case}: confidence {c}"))?;
        }
        let cmax = conf.values.iter().copied().fold(0.0, f64::max);
        ensure(cmax == 1.0, || format!("case {case}: max confidence {cmax}"))?;
        pixels += w * h;
    }
    Ok(format!("300 proposal sets, {pixels} pixels re-verified"))
}

fn archive_round_trip() -> Outcome {
    let mut r = rng(6);
    for case in 0..100 {
        let (stack, _) = oracle::random_stack(&mut r, 8, 4);
        let mut a = Vec::new();
        write_archive(&stack, &mut a).map_err(|e| e.to_string())?;
        let mut b = Vec::new();
        write_archive(&stack, &mut b).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("case {case}: writes differ"))?;
        let back = read_archive(a.as_slice()).map_err(|e| format!("case {case}: {e}"))?;
        ensure(back.metadata == stack.metadata, || format!("case {case}: metadata differs"))?;
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        for (x, y) in back.self_attention.iter().zip(&stack.self_attention) {
            ensure(
                x.layer_index == y.layer_index && x.resolution == y.resolution && bits(&x.data) == bits(&y.data),
                || format!("case {case}: self layer {} differs", y.layer_index),
            )?;
        }
        ensure(back == stack, || format!("case {case}: stack differs"))?;
    }

    let fixtures = malformed_fixtures();
    for (label, bytes, class) in &fixtures {
        match read_archive(bytes.as_slice()) {
            Ok(_) => return Err(format!("malformed fixture '{label}' was accepted")),
            Err(e) => ensure(e.class() == *class, || format!("fixture '{label}': got {}, want {class}", e.class()))?,
        }
    }
    Ok(format!("100 random stacks bitwise; {} malformed fixtures rejected with their class", fixtures.len()))
}

fn header(count: u32) -> Vec<u8> {
    let mut v = b"ATNP".to_vec();
    v.extend(1u16.to_le_bytes());
    v.extend(count.to_le_bytes());
    v
}

fn record(name: &str, dtype: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut v = (name.len() as u16).to_le_bytes().to_vec();
    v.extend(name.as_bytes());
    v.push(dtype);
    v.push(dims.len() as u8);
    for d in dims {
        v.extend(d.to_le_bytes());
    }
    v.extend(payload);
    v
}

fn floats(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn meta() -> Vec<u8> {
    let json = br#"{"model_id":"m","timestep":300,"prompt":"","tokens":[],"image_source":"x","latent_size":2}"#;
    record("meta", 2, &[json.len() as u32], json)
}

fn malformed_fixtures() -> Vec<(&'static str, Vec<u8>, &'static str)> {
    let uniform = floats(&[0.25; 16]);
    let valid = [header(2), record("self/00", 1, &[2, 2, 2, 2], &uniform), meta()].concat();
    let mut bad_magic = valid.clone();
    bad_magic[0] = b'X';
    let mut bad_version = valid.clone();
    bad_version[4] = 2;
    let truncated = [header(2), record("self/00", 1, &[2, 2, 2, 2], &floats(&[0.25; 15]))].concat();
    let wrong_dims = [header(2), record("self/00", 1, &[2, 2, 4], &floats(&[0.5; 16])), meta()].concat();
    let mut half = vec![0.25f32; 16];
    half[0] = 0.0;
    half[1] = 0.0;
    let row_sum = [header(2), record("self/00", 1, &[2, 2, 2, 2], &floats(&half)), meta()].concat();
    let no_meta = [header(1), record("self/00", 1, &[2, 2, 2, 2], &uniform)].concat();
    let trailing = [valid.clone(), vec![0]].concat();
    let unknown_dtype = [header(2), record("self/00", 7, &[2, 2, 2, 2], &uniform), meta()].concat();
    let short_header = b"ATNP\x01".to_vec();
    vec![
        ("altered magic", bad_magic, "bad magic"),
        ("version 2", bad_version, "unsupported version"),
        ("dims (2,2,2,2) with 15 floats", truncated, "truncated record"),
        ("self dims (2,2,4)", wrong_dims, "dimension mismatch"),
        ("row summing to 0.5", row_sum, "invariant violation"),
        ("no meta record", no_meta, "missing meta"),
        ("trailing byte", trailing, "malformed record"),
        ("unknown dtype", unknown_dtype, "malformed record"),
        ("short header", short_header, "truncated record"),
    ]
}

fn png_bytes(dir: &Path, name: &str) -> Result<Vec<u8>, String> {
    std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))
}

fn determinism(budget: Duration) -> Outcome {
    let census = [(64, 5), (32, 5), (16, 5), (8, 1)];
    let stack = oracle::structured_stack(&census, 7);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let archive = tmp.path().join("fixture.atnp");
    let file = std::fs::File::create(&archive).map_err(|e| e.to_string())?;
    write_archive(&stack, std::io::BufWriter::new(file)).map_err(|e| e.to_string())?;
    drop(stack);

    let config = RunConfig::default();
    let slot = ExtractorSlot::new();
    let input = PipelineInput::Archive(archive);
    let started = Instant::now();
    let mut outputs = Vec::new();
    let mut proposals = 0;
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let outcome = run_pipeline(&config, &input, &RunOptions::default(), &dir, &slot).map_err(|e| e.to_string())?;
        proposals = outcome.segmentation.proposals.len();
        outputs.push((png_bytes(&dir, LABELS_FILE)?, png_bytes(&dir, CONFIDENCE_FILE)?));
    }
    let elapsed = started.elapsed();
    ensure(outputs[0] == outputs[1], || "mask or confidence PNG differs between runs".into())?;
    ensure(elapsed <= budget, || format!("two runs took {:.1} s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "census {{64:5, 32:5, 16:5, 8:1}}, M=16 tau=1 N=3: {proposals} proposals, identical PNGs, {:.1} s per run",
        elapsed.as_secs_f64() / 2.0
    ))
}

fn eval_fixture() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pred, gt, out) = (tmp.path().join("pred"), tmp.path().join("gt"), tmp.path().join("out"));
    std::fs::create_dir_all(&pred).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&gt).map_err(|e| e.to_string())?;
    let mask = |px: &[(usize, usize)]| {
        let mut bits = vec![false; 16];
        for &(x, y) in px {
            bits[y * 4 + x] = true;
        }
        BinaryMask::new(4, 4, bits)
    };
    let left: Vec<(usize, usize)> = (0..4).flat_map(|y| [(0, y), (1, y)]).collect();
    // a: TP 2, FP 2, FN 2; b: perfect; c: TP 1, FP 2, FN 0
    let cases = [
        ("a", mask(&[(0, 0), (1, 0), (2, 0), (3, 0)]), mask(&[(0, 0), (1, 0), (0, 1), (1, 1)])),
        ("b", mask(&left), mask(&left)),
        ("c", mask(&[(3, 3), (2, 3), (3, 2)]), mask(&[(3, 3)])),
    ];
    for (id, p, g) in &cases {
        let write = |dir: &Path, m: &BinaryMask| std::fs::write(dir.join(format!("{id}.png")), binary_mask_png(m).unwrap());
        write(&pred, p).map_err(|e| e.to_string())?;
        write(&gt, g).map_err(|e| e.to_string())?;
    }
    let report = evaluate_directories(&pred, &gt, &out).map_err(|e| e.to_string())?;
    let result = report.result.ok_or("nothing evaluated")?;

    // (iou, precision, recall, dsc) as exact fractions of 100
    let per_image = [
        (100.0 / 3.0, 50.0, 50.0, 50.0),
        (100.0, 100.0, 100.0, 100.0),
        (100.0 / 3.0, 100.0 / 3.0, 100.0, 50.0),
    ];
    for (e, want) in result.per_image.iter().zip(&per_image) {
        let m = &e.metrics;
        ensure((m.iou, m.precision, m.recall, m.dsc) == *want, || format!("{}: {m:?}", e.id))?;
    }
    let mean = (
        (100.0 / 3.0 + 100.0 + 100.0 / 3.0) / 3.0,
        (50.0 + 100.0 + 100.0 / 3.0) / 3.0,
        (50.0 + 100.0 + 100.0) / 3.0,
        (50.0 + 100.0 + 50.0) / 3.0,
    );
    let s = &result.mean;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    ensure(
        close(s.iou, mean.0) && close(s.precision, mean.1) && close(s.recall, mean.2) && close(s.dsc, mean.3),
        || format!("mean {s:?}"),
    )?;
    let s = &result.median;
    ensure((s.iou, s.precision, s.recall, s.dsc) == (100.0 / 3.0, 50.0, 100.0, 50.0), || format!("median {s:?}"))?;
    let m = &result.micro;
    ensure(
        (m.iou, m.precision, m.recall, m.dsc) == (1100.0 / 17.0, 1100.0 / 15.0, 1100.0 / 13.0, 2200.0 / 28.0),
        || format!("micro {m:?}"),
    )?;

    let table = std::fs::read_to_string(out.join("report.txt")).map_err(|e| e.to_string())?;
    let expected = "\
Image                      IoU (%) Precision (%) Recall (%)   DSC (%)
a                            33.33         50.00      50.00     50.00
b                           100.00        100.00     100.00    100.00
c                            33.33         33.33     100.00     50.00
---------------------------------------------------------------------
mean                         55.56         61.11      83.33     66.67
median                       33.33         50.00     100.00     50.00
micro (pooled)               64.71         73.33      84.62     78.57
";
    ensure(table == expected, || format!("report.txt differs:\n{table}"))?;
    Ok("3-image fixture: per-image, mean, median, pooled and text report match hand values".into())
}

fn main() {
    type Check = (&'static str, Duration, Box<dyn Fn() -> Outcome>);
    let checks: Vec<Check> = vec![
        ("metrics identities", Duration::from_secs(1), Box::new(metrics_identities)),
        ("KL oracle", Duration::from_secs(1), Box::new(kl_oracle)),
        ("aggregation oracle", Duration::from_secs(10), Box::new(aggregation_oracle)),
        ("merging oracle", Duration::from_secs(30), Box::new(merging_oracle)),
        ("NMS argmax", Duration::from_secs(5), Box::new(nms_check)),
        ("archive round-trip", Duration::from_secs(5), Box::new(archive_round_trip)),
        // fixture construction is setup; the 60 s budget applies to the two runs
        ("determinism", Duration::MAX, Box::new(|| determinism(Duration::from_secs(60)))),
        ("eval harness", Duration::from_secs(5), Box::new(eval_fixture)),
    ];
    let filter: BTreeSet<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in &checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = check();
        let secs = started.elapsed().as_secs_f64();
        let result = result.and_then(|detail| {
            if started.elapsed() <= *budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; over budget ({secs:.2} s > {:?})", budget))
            }
        });
        match result {
            Ok(detail) => println!("PASS  {name:<20} {secs:>7.2} s  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<20} {secs:>7.2} s  {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
