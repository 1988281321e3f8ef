//! Small fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use attnmask::archive::write_archive_file;
use attnmask::masking::BinaryMask;
use attnmask::merging::MergeParams;
use attnmask::pipeline::RunConfig;
use attnmask::raster::binary_mask_png;
use attnmask::stack::{AttentionStack, CrossAttentionTensor};
use image::{Rgb, RgbImage};

#[path = "../oracle/mod.rs"]
pub mod oracle;

pub const PROMPT: &str = "wound";
pub const TOKENS: [&str; 3] = ["<|startoftext|>", "wound", "<|endoftext|>"];

/// Two layers at 8 and two at 4 with three objects; the prompt token
/// attends to the first object.
pub fn small_stack(prompt: &str, timestep: u32) -> AttentionStack {
    let mut stack = oracle::structured_stack(&[(8, 2), (4, 2)], 11);
    let cross = stack
        .self_attention
        .iter()
        .map(|t| {
            let s = t.resolution.side();
            let data = (0..s * s)
                .flat_map(|c| {
                    let (y, x) = ((c / s) as f64 + 0.5, (c % s) as f64 + 0.5);
                    if oracle::object_at(x / s as f64, y / s as f64) == 1 {
                        [0.1f32, 0.8, 0.1]
                    } else {
                        [0.6, 0.1, 0.3]
                    }
                })
                .collect();
            CrossAttentionTensor::new(t.layer_index, t.resolution, 3, data)
        })
        .collect();
    stack.cross_attention = Some(cross);
    stack.metadata.prompt = prompt.to_string();
    stack.metadata.timestep = timestep;
    stack.metadata.token_strings = TOKENS.iter().map(|t| t.to_string()).collect();
    stack.metadata.latent_size = 8;
    stack
}

pub fn write_stack(path: &Path, stack: &AttentionStack) -> PathBuf {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).unwrap();
    }
    write_archive_file(stack, path).unwrap();
    path.to_path_buf()
}

pub fn fixture_archive(dir: &Path) -> PathBuf {
    write_stack(&dir.join("fixture.atnp"), &small_stack(PROMPT, 300))
}

pub fn small_config() -> RunConfig {
    RunConfig {
        target: 8,
        // at R = 8 the default tau chains the background into every object
        merge: MergeParams {
            grid: 4,
            tau: 0.5,
            ..MergeParams::default()
        },
        output_width: 32,
        output_height: 32,
        working_size: 16,
        prompt: PROMPT.to_string(),
        ..RunConfig::default()
    }
}

/// Ground truth covering object `index` (0-based) at `w x h`.
pub fn object_mask(index: usize, w: usize, h: usize) -> BinaryMask {
    let bits = (0..w * h)
        .map(|p| {
            let (x, y) = (((p % w) as f64 + 0.5) / w as f64, ((p / w) as f64 + 0.5) / h as f64);
            oracle::object_at(x, y) == index + 1
        })
        .collect();
    BinaryMask::new(w, h, bits)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> PathBuf {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).unwrap();
    }
    std::fs::write(path, binary_mask_png(mask).unwrap()).unwrap();
    path.to_path_buf()
}

pub fn write_rgb(path: &Path, w: u32, h: u32) -> PathBuf {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).unwrap();
    }
    let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, 90]));
    img.save(path).unwrap();
    path.to_path_buf()
}

/// Writes an executable shell script and returns a template invoking it.
pub fn stub_extractor(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    format!(
        "sh {} --image {{image}} --prompt {{prompt}} --timestep {{timestep}} --out {{out}}",
        path.display()
    )
}

/// Stub that copies `archive` to the requested output path.
pub fn copying_extractor(dir: &Path, archive: &Path) -> String {
    stub_extractor(
        dir,
        "copy_stub.sh",
        &format!(
            "while [ $# -gt 0 ]; do case \"$1\" in --out) out=\"$2\"; shift;; esac; shift; done\ncp '{}' \"$out\"",
            archive.display()
        ),
    )
}
