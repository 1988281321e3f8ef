//! The external attention extractor, driven through a command template.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use thiserror::Error;

use crate::archive::{read_archive_file, ArchiveError};
use crate::stack::AttentionStack;

pub const PLACEHOLDERS: [&str; 4] = ["{image}", "{prompt}", "{timestep}", "{out}"];

/// Environment variable overriding the configured template.
pub const EXTRACTOR_ENV: &str = "ATTNMASK_EXTRACTOR";

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error("invalid extractor template: {0}")]
    Template(String),
    #[error("failed to launch extractor '{program}': {source}")]
    Spawn {
        program: String,
        source: std::io::Error,
    },
    #[error("extractor exited with {code:?}: {stderr}")]
    Failed {
        code: Option<i32>,
        stdout: String,
        stderr: String,
    },
    #[error("extractor output unusable: {0}")]
    Output(#[from] ArchiveError),
    #[error("metadata mismatch: {field} is {actual}, requested {expected}")]
    MetadataMismatch {
        field: &'static str,
        expected: String,
        actual: String,
    },
}

pub fn missing_placeholder(template: &str) -> Option<&'static str> {
    PLACEHOLDERS.iter().copied().find(|p| !template.contains(p))
}

/// Splits the template into argv and substitutes placeholders per argument,
/// so values containing spaces stay one argument.
pub fn render_command(
    template: &str,
    image: &Path,
    prompt: &str,
    timestep: u32,
    out: &Path,
) -> Result<Vec<String>, ExtractorError> {
    if let Some(p) = missing_placeholder(template) {
        return Err(ExtractorError::Template(format!("missing {p}")));
    }
    let words = shlex::split(template)
        .ok_or_else(|| ExtractorError::Template("unbalanced quotes".into()))?;
    if words.is_empty() {
        return Err(ExtractorError::Template("empty command".into()));
    }
    let image = image.to_string_lossy();
    let out = out.to_string_lossy();
    let t = timestep.to_string();
    Ok(words
        .into_iter()
        .map(|w| {
            w.replace("{image}", &image)
                .replace("{timestep}", &t)
                .replace("{out}", &out)
                .replace("{prompt}", prompt)
        })
        .collect())
}

/// Serializes extractor runs; the accelerator is used by one capture at a time.
#[derive(Debug, Default)]
pub struct ExtractorSlot(Mutex<()>);

impl ExtractorSlot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn invoke(
        &self,
        template: &str,
        image: &Path,
        prompt: &str,
        timestep: u32,
        out: &Path,
    ) -> Result<(PathBuf, AttentionStack), ExtractorError> {
        let _guard = self.0.lock().unwrap_or_else(|e| e.into_inner());
        invoke_extractor(template, image, prompt, timestep, out)
    }
}

/// Runs the extractor and checks the archive it writes.
pub fn invoke_extractor(
    template: &str,
    image: &Path,
    prompt: &str,
    timestep: u32,
    out: &Path,
) -> Result<(PathBuf, AttentionStack), ExtractorError> {
    let argv = render_command(template, image, prompt, timestep, out)?;
    tracing::info!(command = ?argv, "invoking extractor");
    let output = Command::new(&argv[0])
        .args(&argv[1..])
        .output()
        .map_err(|source| ExtractorError::Spawn {
            program: argv[0].clone(),
            source,
        })?;
    if !output.status.success() {
        return Err(ExtractorError::Failed {
            code: output.status.code(),
            stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    let stack = read_archive_file(out)?;
    if stack.metadata.timestep != timestep {
        return Err(ExtractorError::MetadataMismatch {
            field: "timestep",
            expected: timestep.to_string(),
            actual: stack.metadata.timestep.to_string(),
        });
    }
    if stack.metadata.prompt != prompt {
        return Err(ExtractorError::MetadataMismatch {
            field: "prompt",
            expected: prompt.to_string(),
            actual: stack.metadata.prompt.clone(),
        });
    }
    Ok((out.to_path_buf(), stack))
}
