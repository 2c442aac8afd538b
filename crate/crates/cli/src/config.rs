//! Optional TOML config for `counsel serve`. Command-line flags win over
//! the file, the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub serve: ServeFile,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeFile {
    pub listen: Option<String>,
    pub spec: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub agents: Option<PathBuf>,
    pub backend: Option<String>,
    pub script: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub token: Option<String>,
    pub idle_minutes: Option<i64>,
}

pub fn load(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
}
