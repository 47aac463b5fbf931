use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use slicekit::coco::write_text;
use slicekit::seed::sha256_hex;

use crate::config::ToolConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Reproducibility record written next to a command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: ToolConfig,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub wall_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    started: Instant,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Core(slicekit::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }))?;
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(self, config: &ToolConfig, path: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool: "slicekit",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed: config.seed,
            config: config.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_text(path, &text)?;
        Ok(())
    }
}

/// `preds.json` -> `preds.manifest.json`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.manifest.json"))
}
