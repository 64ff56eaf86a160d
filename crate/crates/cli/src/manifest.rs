//! `manifest.json`: everything needed to rerun a command and check its
//! outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest<C, I> {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: C,
    pub inputs: I,
    pub outputs: Vec<PathBuf>,
}

impl<C: Serialize + DeserializeOwned, I: Serialize + DeserializeOwned> RunManifest<C, I> {
    pub fn new(command: &str, seed: u64, config: C, inputs: I, outputs: Vec<PathBuf>) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            inputs,
            outputs,
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path, command: &str) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.command != command {
            bail!("{} records a '{}' run, not '{command}'", path.display(), m.command);
        }
        Ok(m)
    }
}

/// Absolute form of `p`, so a manifest stays usable from another directory.
pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
