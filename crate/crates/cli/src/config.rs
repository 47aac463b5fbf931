//! The JSON configuration shared by every subcommand.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! explicit command-line flags. The top-level `seed` is copied into every
//! section that draws random numbers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slicekit::detector::VisibilityModel;
use slicekit::eval::EvalConfig;
use slicekit::pipeline::PipelineConfig;
use slicekit::slicer::SliceJobConfig;
use slicekit::synth::SceneConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Ground truth filtered by the visibility model.
    #[default]
    Oracle,
    /// Answers recorded in a replay store.
    Replay,
    /// A child process speaking the line-delimited JSON protocol.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub backend: Backend,
    pub replay_store: Option<PathBuf>,
    pub command: Option<String>,
    pub workers: usize,
    pub timeout_secs: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Oracle,
            replay_store: None,
            command: None,
            workers: 1,
            timeout_secs: 300,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub slice: SliceJobConfig,
    pub eval: EvalConfig,
    pub visibility: VisibilityModel,
    pub detector: DetectorConfig,
    /// Replaces the named benchmark scene when present.
    pub scene: Option<SceneConfig>,
}

impl ToolConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Pushes the top-level seed into the seeded sections.
    pub fn propagate_seed(&mut self) {
        self.pipeline.seed = self.seed;
        self.slice.seed = self.seed;
        if let Some(scene) = &mut self.scene {
            scene.seed = self.seed;
        }
    }
}

/// Overwrites `target` when the flag was given.
pub fn set<T>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}
