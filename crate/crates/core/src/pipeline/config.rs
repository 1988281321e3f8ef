use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::aggregation::{WeightMode, DEFAULT_TARGET};
use crate::guidance::{GuidanceMode, SelectionPolicy};
use crate::masking::DEFAULT_OUTPUT_SIZE;
use crate::merging::MergeParams;
use crate::metrics::SelectionMode;
use crate::stack::DEFAULT_TIMESTEP;

use super::PipelineError;

/// How a binary mask is derived from the label mask.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Selection {
    #[default]
    None,
    Policy(SelectionPolicy),
    /// Needs ground truth; an upper bound, never a zero-shot result.
    OracleBestRegion,
}

impl Selection {
    pub fn mode(&self) -> Option<SelectionMode> {
        match *self {
            Selection::None => None,
            Selection::Policy(policy) => Some(SelectionMode::Guided { policy }),
            Selection::OracleBestRegion => Some(SelectionMode::OracleBestRegion),
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::None => write!(f, "none"),
            Selection::Policy(p) => write!(f, "{p}"),
            Selection::OracleBestRegion => write!(f, "oracle-best-region"),
        }
    }
}

impl FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Selection::None),
            "oracle-best-region" => Ok(Selection::OracleBestRegion),
            other => other
                .parse()
                .map(Selection::Policy)
                .map_err(|e| format!("{e}; expected none, top1, ratio:<rho> or oracle-best-region")),
        }
    }
}

impl Serialize for Selection {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything that determines a run's outputs, given its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub target: usize,
    pub merge: MergeParams,
    pub weights: WeightMode,
    pub output_width: usize,
    pub output_height: usize,
    /// Use the source image's own size for the output masks.
    pub native_output: bool,
    pub selection: Selection,
    pub guidance: GuidanceMode,
    /// Token positions for relevance; `None` selects every non-special token.
    pub tokens: Option<Vec<usize>>,
    pub prompt: String,
    pub timestep: u32,
    /// Command template with `{image}`, `{prompt}`, `{timestep}`, `{out}`.
    pub extractor: Option<String>,
    /// Side of the square raster handed to the extractor.
    pub working_size: usize,
    pub split_components: bool,
    pub persist_aggregated: bool,
    /// The pipeline draws no random numbers; this must stay `true`.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target: DEFAULT_TARGET,
            merge: MergeParams::default(),
            weights: WeightMode::Proportional,
            output_width: DEFAULT_OUTPUT_SIZE,
            output_height: DEFAULT_OUTPUT_SIZE,
            native_output: false,
            selection: Selection::None,
            guidance: GuidanceMode::Rank,
            tokens: None,
            prompt: String::new(),
            timestep: DEFAULT_TIMESTEP,
            extractor: None,
            working_size: DEFAULT_OUTPUT_SIZE,
            split_components: false,
            persist_aggregated: false,
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field: &'static str, detail: String| Err(PipelineError::Config { field, detail });
        if self.target < 1 {
            return bad("target", "must be >= 1".into());
        }
        if let Err(e) = self.merge.validate(self.target) {
            let field = match &e {
                crate::merging::MergeError::InvalidParam { field, .. } => field,
                _ => "grid",
            };
            return bad(field, e.to_string());
        }
        if self.output_width < self.target || self.output_height < self.target {
            return bad(
                "output_size",
                format!(
                    "{}x{} is smaller than target {}",
                    self.output_width, self.output_height, self.target
                ),
            );
        }
        if self.timestep < 1 {
            return bad("timestep", "must be >= 1".into());
        }
        if self.working_size < 1 {
            return bad("working_size", "must be >= 1".into());
        }
        if let Selection::Policy(p) = self.selection {
            if let Err(e) = p.validate() {
                return bad("select", e.to_string());
            }
        }
        if matches!(&self.tokens, Some(t) if t.is_empty()) {
            return bad("tokens", "token selection must not be empty".into());
        }
        if let Some(t) = &self.extractor {
            if let Some(missing) = super::extractor::missing_placeholder(t) {
                return bad("extractor", format!("template lacks {missing}"));
            }
        }
        if !self.deterministic {
            return bad("deterministic", "the pipeline has no random mode".into());
        }
        Ok(())
    }

    /// Stable JSON used for run ids.
    pub fn canonical_json(&self) -> Vec<u8> {
        // struct field order is fixed, so serde output is canonical
        serde_json::to_vec(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json()))
    }
}
