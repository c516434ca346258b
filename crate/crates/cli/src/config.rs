//! Run configuration shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use wsr_core::render::Precision;
use wsr_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scene: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; all available cores when unset.
    pub workers: Option<usize>,
    pub precision: Precision,
    pub paths: Paths,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads JSON when the extension is `.json`, TOML otherwise.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, is_json(path)).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str, json: bool) -> anyhow::Result<Self> {
        let cfg: Self = if json { serde_json::from_str(text)? } else { toml::from_str(text)? };
        if cfg.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        Ok(cfg)
    }

    pub fn to_text(&self, json: bool) -> anyhow::Result<String> {
        Ok(if json { serde_json::to_string_pretty(self)? } else { toml::to_string_pretty(self)? })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        crate::ensure_parent(path)?;
        fs::write(path, self.to_text(is_json(path))?).with_context(|| format!("writing {}", path.display()))
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}
