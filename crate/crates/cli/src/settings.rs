//! `key=value` configuration files overlaid by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, CliResult};

/// Resolved settings for one command. Keys use underscores.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    /// Reads `key=value` lines; blank lines and `#` comments are skipped.
    /// Only keys in `known` are accepted.
    pub fn from_file(path: &Path, known: &[&str]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
            })?;
            let k = normalize_key(k);
            if !known.contains(&k.as_str()) {
                return Err(CliError::Usage(format!("{}:{}: unknown key {k:?}", path.display(), n + 1)));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    /// Builds settings from an optional config file, then applies flags.
    /// A flag that was given replaces the file's value.
    pub fn resolve(config: Option<&Path>, flags: Vec<(&str, Option<String>)>) -> CliResult<Self> {
        let known: Vec<&str> = flags.iter().map(|(k, _)| *k).collect();
        let mut s = match config {
            Some(p) => Settings::from_file(p, &known)?,
            None => Settings::default(),
        };
        for (k, v) in flags {
            if let Some(v) = v {
                s.values.insert(k.to_string(), v);
            }
        }
        Ok(s)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("invalid value for {key}: {v:?}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T> {
        self.get(key)?.ok_or_else(|| CliError::Usage(format!("missing required setting {key} (flag --{})", key.replace('_', "-"))))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> CliResult<PathBuf> {
        self.require::<String>(key).map(PathBuf::from)
    }

    /// Comma-separated list value.
    pub fn paths(&self, key: &str) -> Vec<PathBuf> {
        self.raw(key)
            .map(|v| v.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect())
            .unwrap_or_default()
    }

    pub fn flag(&self, key: &str) -> CliResult<bool> {
        self.get_or(key, false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }
}

/// Flag value as a setting string.
pub fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

/// Repeated flag as a comma-separated setting string.
pub fn list(v: &[PathBuf]) -> Option<String> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","))
    }
}

/// Boolean switch: only a set switch overrides the file.
pub fn switch(v: bool) -> Option<String> {
    v.then(|| "true".to_string())
}
