use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

/// What a run read, wrote and was configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, enough to replay the run.
    pub argv: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub preset: Option<String>,
    pub thresholds: Option<serde_json::Value>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_at: String,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn default_path(outputs: &[PathBuf]) -> Option<PathBuf> {
        let first = outputs.first()?;
        let mut name = first.file_name()?.to_os_string();
        name.push(".manifest.json");
        Some(first.with_file_name(name))
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        serde_json::from_reader(BufReader::new(file)).with_context(|| format!("reading manifest {}", path.display()))
    }
}
