//! Optional `--config` file supplying defaults for the global and
//! subcommand flags. Relative paths resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub manifest: Option<PathBuf>,
    pub log_level: Option<String>,
    /// Region proposal directory for `autolabel` and `serve`.
    pub regions: Option<PathBuf>,
    /// LLM endpoint TOML for `autolabel`.
    pub endpoint: Option<PathBuf>,
    pub bind: Option<String>,
    pub block: Option<u32>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: CliConfig = toml::from_str(&text).map_err(|source| ConfigError::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.regions, &mut cfg.endpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qground.toml");
        fs::write(&p, "manifest = \"m.jsonl\"\nregions = \"/abs/regions\"\nblock = 4\n").unwrap();
        let c = CliConfig::load(&p).unwrap();
        assert_eq!(c.manifest, Some(dir.path().join("m.jsonl")));
        assert_eq!(c.regions, Some(PathBuf::from("/abs/regions")));
        assert_eq!(c.block, Some(4));
        fs::write(&p, "manfest = \"x\"\n").unwrap();
        assert!(matches!(CliConfig::load(&p), Err(ConfigError::Toml { .. })));
    }
}
