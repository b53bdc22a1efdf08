//! The JSON run configuration: one file, one section per subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use samhead_core::eval::ApInterpolation;
use samhead_core::pipeline::ScaleSubset;
use samhead_core::{DetectorConfig, EvalProtocol, SynthConfig};

use crate::failure::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Used when `--seed` is absent; 0 when both are absent.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub detector: DetectorConfig,
    pub protocol: EvalProtocol,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub plot: PlotSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub interpolation: ApInterpolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Each entry is a list of layer names pooled together.
    pub combinations: Vec<Vec<String>>,
    pub subsets: Vec<ScaleSubset>,
    /// Per-cell PCA width; `None` keeps every channel.
    pub target_dim: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        SweepSection {
            combinations: vec![s(&["conv3"]), s(&["conv4a"]), s(&["conv5a"]), s(&["conv3", "conv4a"]), s(&["conv4a", "conv5a"])],
            subsets: vec![ScaleSubset::small(), ScaleSubset::large(), ScaleSubset::all()],
            target_dim: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    pub title: Option<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("bad config {}: {e}", path.display())))
    }
}
