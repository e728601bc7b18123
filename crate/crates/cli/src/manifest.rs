use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::Serialize;

/// Provenance of one command run: what configuration and seeds went in and
/// which files came out.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the resolved configuration in canonical TOML.
    pub config_hash: String,
    pub seed: u64,
    /// Derived seed of every random stream the command drew from.
    pub streams: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: String,
}

impl Manifest {
    pub fn path(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join("manifest").join(format!("{}.json", command))
    }

    pub fn write(&self, out_dir: &Path) -> anyhow::Result<PathBuf> {
        let path = Self::path(out_dir, &self.command);
        let dir = path.parent().expect("manifest path has a parent");
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
