//! `key = value` configuration files with command-line overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory of the file that named them. Every value
//! read through [`Settings`], including defaults, is recorded so it can be
//! written to the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    /// Directory each key's value is relative to.
    origins: BTreeMap<String, PathBuf>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse(source: &str, base: &Path) -> Result<Settings, CliError> {
    let mut settings = Settings::default();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected key = value", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::config(format!("line {}: empty key", i + 1)));
        }
        if settings.values.contains_key(key) {
            return Err(CliError::config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        settings.insert(key, value.trim(), base);
    }
    Ok(settings)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings, CliError> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                parse(&text, &base)
            }
        }
    }

    fn insert(&mut self, key: &str, value: &str, base: &Path) {
        self.values.insert(key.to_string(), value.to_string());
        self.origins.insert(key.to_string(), base.to_path_buf());
    }

    /// Applies `key=value` overrides; paths in them are relative to the
    /// working directory.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("override {o:?} is not key=value")))?;
            self.insert(k.trim(), v.trim(), Path::new(""));
        }
        Ok(())
    }

    /// Records a value that came from a dedicated command-line flag.
    pub fn record(&mut self, key: &str, value: impl Display) {
        self.used.insert(key.to_string());
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// A flag value when given, else the configured value or `default`.
    pub fn flag_or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match flag {
            Some(v) => {
                self.record(key, &v);
                Ok(v)
            }
            None => self.get(key, default),
        }
    }

    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let value = match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| CliError::config(format!("{key} = {raw:?}: {e}")))?,
            None => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>, CliError> {
        let fallback = join(default);
        let raw: String = self.get(key, fallback)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| CliError::config(format!("{key} = {raw:?}: {e}")))
            })
            .collect()
    }

    pub fn path(&mut self, key: &str) -> Result<Option<PathBuf>, CliError> {
        self.used.insert(key.to_string());
        let Some(raw) = self.values.get(key) else {
            return Ok(None);
        };
        let p = Path::new(raw);
        let resolved = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.origins[key].join(p)
        };
        self.resolved.insert(key.to_string(), resolved.display().to_string());
        Ok(Some(resolved))
    }

    pub fn required_path(&mut self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key)?
            .ok_or_else(|| CliError::config(format!("missing required key {key:?}")))
    }

    /// Fails on keys that no part of the command consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&String> = self.values.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(format!("unknown configuration keys: {unknown:?}")))
        }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
