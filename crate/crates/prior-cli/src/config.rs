//! Key-value config file support. One `key = value` pair per line, `#`
//! comments; keys use the same names as the long CLI flags. Command-line
//! values always win over file values.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "config line {} is not `key = value`: {line:?}",
                    lineno + 1
                );
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// Flag value if present, else config value, else the built-in default.
    pub fn resolve<T: FromStr + Clone>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key '{key}' = {raw:?}: {e}")),
            None => Ok(default),
        }
    }

    /// Seed resolution has one extra fallback: the PRIOR_SEED variable.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Some(raw) = self.values.get("seed") {
            return raw
                .parse::<u64>()
                .map_err(|e| anyhow::anyhow!("config key 'seed' = {raw:?}: {e}"));
        }
        match std::env::var("PRIOR_SEED") {
            Ok(raw) => raw
                .parse::<u64>()
                .map_err(|e| anyhow::anyhow!("PRIOR_SEED = {raw:?}: {e}")),
            Err(_) => Ok(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let dir = std::env::temp_dir().join(format!("prior-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.conf");
        std::fs::write(&path, "# comment\nsteps = 123\nalpha = 2.5\n").unwrap();
        let cfg = ConfigFile::load(Some(&path)).unwrap();
        assert_eq!(cfg.resolve(None, "steps", 1u64).unwrap(), 123);
        assert_eq!(cfg.resolve(Some(9u64), "steps", 1).unwrap(), 9);
        assert_eq!(cfg.resolve::<f64>(None, "alpha", 1.0).unwrap(), 2.5);
        assert_eq!(cfg.resolve::<f64>(None, "missing", 7.0).unwrap(), 7.0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_malformed_lines() {
        let dir = std::env::temp_dir().join(format!("prior-config-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.conf");
        std::fs::write(&path, "steps 123\n").unwrap();
        assert!(ConfigFile::load(Some(&path)).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
