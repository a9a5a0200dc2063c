use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::cmd::Command;
use crate::input::Output;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const TOOL: &str = "icpcov";

/// Everything needed to re-run a stage: the command with its inputs made
/// absolute, and the fully resolved configuration of every module it
/// touched. The output directory is deliberately absent so that two runs
/// of the same command produce identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: Command,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: Command, config: serde_json::Value, outputs: Vec<String>) -> Self {
        RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            tool: TOOL.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command,
            config,
            outputs,
        }
    }

    pub fn write(&self, out: &mut Output) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        out.write(MANIFEST_FILE, text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            bail!("{}: manifest format {} is not supported (expected {})", path.display(), m.format_version, MANIFEST_FORMAT_VERSION);
        }
        if m.tool_version != env!("CARGO_PKG_VERSION") {
            log::warn!("manifest written by {} {}, replaying with {}", m.tool, m.tool_version, env!("CARGO_PKG_VERSION"));
        }
        Ok(m)
    }
}
