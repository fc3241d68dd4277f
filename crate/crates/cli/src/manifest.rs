use std::fs;
use std::path::{Path, PathBuf};

use mlopf::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::{Cli, Command, GlobalArgs};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to regenerate an output directory: the exact command
/// line plus the resolved settings it ran with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub argv: Vec<String>,
    pub command: Command,
    pub settings: GlobalArgs,
    /// Solver settings after defaults were applied.
    pub solver: Option<SolverConfig>,
    /// Partition actually used, as a document of roots.
    pub partition_source: Option<String>,
    pub output_dir: PathBuf,
}

impl RunManifest {
    pub fn new(cli: &Cli, argv: &[String], output_dir: &Path) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv: argv.to_vec(),
            command: cli.command.clone(),
            settings: cli.global.clone(),
            solver: None,
            partition_source: None,
            output_dir: output_dir.to_path_buf(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
