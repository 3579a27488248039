use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

pub const CONFIG_ENV: &str = "FABRIC_CONFIG";
pub const DEFAULT_ENVIRONMENT: &str = "research";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// Config file; relative paths resolve against the file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub store: Option<PathBuf>,
    pub environment: Option<String>,
    pub addr: Option<String>,
    pub key_file: Option<PathBuf>,
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub environment: Option<String>,
    pub addr: Option<String>,
    pub key_file: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub store: Option<PathBuf>,
    pub environment: String,
    pub addr: String,
    pub key_file: Option<PathBuf>,
}

impl Settings {
    /// Flags win over the config file; the file comes from `--config`, else `FABRIC_CONFIG`.
    pub fn resolve(overrides: &Overrides, env_config: Option<PathBuf>) -> Result<Settings, CliError> {
        let path = overrides.config.clone().or(env_config);
        let (file, base) = match &path {
            None => (ConfigFile::default(), PathBuf::new()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| CliError::io(format!("config {}: {e}", p.display())))?;
                let file: ConfigFile =
                    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?;
                (file, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
        };
        let rebase = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
        Ok(Settings {
            store: overrides.store.clone().or(file.store.map(rebase)),
            environment: overrides
                .environment
                .clone()
                .or(file.environment)
                .unwrap_or_else(|| DEFAULT_ENVIRONMENT.into()),
            addr: overrides
                .addr
                .clone()
                .or(file.addr)
                .unwrap_or_else(|| DEFAULT_ADDR.into()),
            key_file: overrides.key_file.clone().or(file.key_file.map(rebase)),
        })
    }

    pub fn store(&self) -> Result<&Path, CliError> {
        self.store
            .as_deref()
            .ok_or_else(|| CliError::usage("no store: pass --store or set `store` in the config file"))
    }

    pub fn key(&self) -> Result<Vec<u8>, CliError> {
        let path = self
            .key_file
            .as_deref()
            .ok_or_else(|| CliError::usage("no key material: pass --key-file or set `key_file` in the config file"))?;
        let raw = std::fs::read(path).map_err(|e| CliError::io(format!("key file {}: {e}", path.display())))?;
        let trimmed = raw.trim_ascii();
        if trimmed.is_empty() {
            return Err(CliError::usage(format!("key file {} is empty", path.display())));
        }
        Ok(trimmed.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_paths_rebase() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("fabric.json");
        std::fs::write(&cfg, r#"{"store": "data", "environment": "clinic", "key_file": "/k"}"#).unwrap();
        let s = Settings::resolve(&Overrides::default(), Some(cfg.clone())).unwrap();
        assert_eq!(s.store.unwrap(), dir.path().join("data"));
        assert_eq!(s.environment, "clinic");
        assert_eq!(s.addr, DEFAULT_ADDR);
        let o = Overrides {
            config: Some(cfg),
            environment: Some("research".into()),
            ..Default::default()
        };
        let s = Settings::resolve(&o, None).unwrap();
        assert_eq!(s.environment, "research");
        assert_eq!(s.key_file.unwrap(), PathBuf::from("/k"));
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("fabric.json");
        std::fs::write(&cfg, r#"{"stor": "x"}"#).unwrap();
        assert_eq!(
            Settings::resolve(&Overrides::default(), Some(cfg))
                .unwrap_err()
                .exit_code(),
            2
        );
        let missing = dir.path().join("absent.json");
        assert_eq!(
            Settings::resolve(&Overrides::default(), Some(missing))
                .unwrap_err()
                .exit_code(),
            3
        );
    }
}
