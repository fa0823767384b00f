//! Per-run metadata written next to every command's outputs.

use std::path::{Path, PathBuf};

use imagedpo_core::records::write_json_pretty;
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunMeta<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    /// Arguments after the program name, verbatim.
    pub argv: &'a [String],
    /// Resolved configuration, after flag overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<&'a RunConfig>,
    pub seeds: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub formats: Value,
}

impl<'a> RunMeta<'a> {
    pub fn new(command: &'a str, argv: &'a [String]) -> Self {
        RunMeta {
            tool: "imagedpo",
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv,
            config: None,
            seeds: Value::Object(Default::default()),
            inputs: vec![],
            outputs: vec![],
            formats: serde_json::json!({
                "image": "binary PGM P5, maxval 255",
                "params": "little-endian f64 array + JSON sidecar",
                "records": "JSON lines",
            }),
        }
    }

    pub fn config(mut self, cfg: &'a RunConfig) -> Self {
        self.config = Some(cfg);
        self
    }

    pub fn seeds(mut self, seeds: Value) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_json_pretty(path, self)?;
        Ok(())
    }
}

/// `DIR/<command>.meta.json` for directory outputs.
pub fn in_dir(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.meta.json"))
}

/// `x.csv` → `x.meta.json` for file outputs.
pub fn beside(file: &Path) -> PathBuf {
    file.with_extension("meta.json")
}
