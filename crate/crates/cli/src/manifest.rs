use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every set of outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Dotted config keys set from the environment.
    pub env_overrides: Vec<String>,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub started_unix_s: f64,
    pub wall_time_s: f64,
    /// Output file name to schema version.
    pub outputs: BTreeMap<String, u32>,
    pub config: RunConfig,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config_path: Option<&Path>, env_overrides: Vec<String>, output_dir: &Path, parallelism: usize, config: RunConfig) -> Self {
        let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Self {
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                config_path: config_path.map(Path::to_path_buf),
                env_overrides,
                output_dir: output_dir.to_path_buf(),
                parallelism,
                started_unix_s,
                wall_time_s: 0.0,
                outputs: BTreeMap::new(),
                config,
            },
            started: Instant::now(),
        }
    }

    pub fn output(&mut self, file: &str, schema_version: u32) {
        self.manifest.outputs.insert(file.to_string(), schema_version);
    }

    pub fn finish(mut self) -> anyhow::Result<RunManifest> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        let path = self.manifest.output_dir.join(MANIFEST_FILE);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &self.manifest)?;
        Ok(self.manifest)
    }
}
