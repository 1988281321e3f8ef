mod common;

use std::fs;

use attnmask::pipeline::{
    invoke_extractor, run_pipeline, ExtractorError, ExtractorSlot, PipelineError, PipelineInput,
    RunManifest, RunOptions, CAPTURE_FILE, WORKING_IMAGE_FILE,
};
use attnmask::raster;
use common::*;

#[test]
fn copying_stub_round_trips_the_capture() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = fixture_archive(tmp.path());
    let template = copying_extractor(tmp.path(), &archive);
    let image = write_rgb(&tmp.path().join("img.png"), 16, 16);
    let out = tmp.path().join("captured.atnp");
    let (path, stack) = invoke_extractor(&template, &image, PROMPT, 300, &out).unwrap();
    assert_eq!(path, out);
    assert_eq!(stack, small_stack(PROMPT, 300));
}

#[test]
fn nonzero_exit_keeps_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let template = stub_extractor(tmp.path(), "fail.sh", "echo 'CUDA out of memory' >&2\nexit 3");
    let image = write_rgb(&tmp.path().join("img.png"), 8, 8);
    let err = invoke_extractor(&template, &image, PROMPT, 300, &tmp.path().join("o.atnp")).unwrap_err();
    match err {
        ExtractorError::Failed { code, stderr, .. } => {
            assert_eq!(code, Some(3));
            assert!(stderr.contains("CUDA out of memory"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn wrong_timestep_is_a_metadata_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = write_stack(&tmp.path().join("t50.atnp"), &small_stack(PROMPT, 50));
    let template = copying_extractor(tmp.path(), &archive);
    let image = write_rgb(&tmp.path().join("img.png"), 8, 8);
    let err = invoke_extractor(&template, &image, PROMPT, 300, &tmp.path().join("o.atnp")).unwrap_err();
    assert!(
        matches!(&err, ExtractorError::MetadataMismatch { field: "timestep", expected, actual } if expected == "300" && actual == "50"),
        "{err}"
    );
}

#[test]
fn wrong_prompt_is_a_metadata_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = write_stack(&tmp.path().join("other.atnp"), &small_stack("scar", 300));
    let template = copying_extractor(tmp.path(), &archive);
    let image = write_rgb(&tmp.path().join("img.png"), 8, 8);
    let err = invoke_extractor(&template, &image, PROMPT, 300, &tmp.path().join("o.atnp")).unwrap_err();
    assert!(matches!(err, ExtractorError::MetadataMismatch { field: "prompt", .. }), "{err}");
}

#[test]
fn silent_success_without_output_is_an_output_error() {
    let tmp = tempfile::tempdir().unwrap();
    let template = stub_extractor(tmp.path(), "noop.sh", "exit 0");
    let image = write_rgb(&tmp.path().join("img.png"), 8, 8);
    let err = invoke_extractor(&template, &image, PROMPT, 300, &tmp.path().join("o.atnp")).unwrap_err();
    assert!(matches!(err, ExtractorError::Output(_)), "{err}");
}

#[test]
fn garbage_output_is_an_output_error() {
    let tmp = tempfile::tempdir().unwrap();
    let template = stub_extractor(
        tmp.path(),
        "junk.sh",
        "while [ $# -gt 0 ]; do case \"$1\" in --out) out=\"$2\"; shift;; esac; shift; done\nprintf 'NOPE' > \"$out\"",
    );
    let image = write_rgb(&tmp.path().join("img.png"), 8, 8);
    let err = invoke_extractor(&template, &image, PROMPT, 300, &tmp.path().join("o.atnp")).unwrap_err();
    assert!(matches!(err, ExtractorError::Output(_)), "{err}");
}

#[test]
fn missing_program_is_a_spawn_error() {
    let tmp = tempfile::tempdir().unwrap();
    let image = write_rgb(&tmp.path().join("img.png"), 8, 8);
    let template = "/nonexistent/extract --image {image} --prompt {prompt} --timestep {timestep} --out {out}";
    let err = invoke_extractor(template, &image, PROMPT, 300, &tmp.path().join("o.atnp")).unwrap_err();
    assert!(matches!(err, ExtractorError::Spawn { .. }), "{err}");
}

#[test]
fn prompt_with_spaces_reaches_the_extractor_as_one_argument() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("argv.txt");
    let archive = write_stack(&tmp.path().join("c.atnp"), &small_stack("open wound", 300));
    let template = stub_extractor(
        tmp.path(),
        "log.sh",
        &format!(
            "for a in \"$@\"; do echo \"$a\" >> '{}'; done\nwhile [ $# -gt 0 ]; do case \"$1\" in --out) out=\"$2\"; shift;; esac; shift; done\ncp '{}' \"$out\"",
            log.display(),
            archive.display()
        ),
    );
    let image = write_rgb(&tmp.path().join("img.png"), 8, 8);
    invoke_extractor(&template, &image, "open wound", 300, &tmp.path().join("o.atnp")).unwrap();
    let argv: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(argv[3], "open wound");
    assert_eq!(argv[5], "300");
}

#[test]
fn image_input_runs_end_to_end_through_the_stub() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = fixture_archive(tmp.path());
    let mut config = small_config();
    config.extractor = Some(copying_extractor(tmp.path(), &archive));
    let image = write_rgb(&tmp.path().join("photo.png"), 50, 30);
    let out = tmp.path().join("run");
    let outcome = run_pipeline(
        &config,
        &PipelineInput::Image(image),
        &RunOptions::default(),
        &out,
        &ExtractorSlot::new(),
    )
    .unwrap();
    let working = raster::load_rgb(out.join(WORKING_IMAGE_FILE)).unwrap();
    assert_eq!(working.dimensions(), (16, 16));
    assert_eq!(fs::read(out.join(CAPTURE_FILE)).unwrap(), fs::read(&archive).unwrap());
    let manifest = RunManifest::load(&out).unwrap();
    assert!(manifest.artifact(CAPTURE_FILE).is_some());
    assert!(manifest.artifact(WORKING_IMAGE_FILE).is_some());
    assert!(manifest.inputs.iter().any(|i| i.role == "image"));
    assert!(!outcome.segmentation.proposals.is_empty());
}

#[test]
fn extractor_failure_surfaces_through_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config.extractor = Some(stub_extractor(tmp.path(), "fail.sh", "echo boom >&2; exit 1"));
    let image = write_rgb(&tmp.path().join("photo.png"), 20, 20);
    let err = run_pipeline(
        &config,
        &PipelineInput::Image(image),
        &RunOptions::default(),
        &tmp.path().join("run"),
        &ExtractorSlot::new(),
    )
    .unwrap_err();
    assert!(matches!(err, PipelineError::Extractor(ExtractorError::Failed { .. })));
    assert!(err.to_string().contains("boom"), "{err}");
}
