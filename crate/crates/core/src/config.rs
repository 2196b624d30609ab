//! Plain `key=value` configuration files with dotted section keys
//! (`train.lr=0.001`). Lines starting with `#` are comments.
//!
//! Consumers pull keys out with the typed getters and finish with
//! [`KvConfig::reject_unknown`], so typos surface as errors instead of
//! being silently ignored.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                )));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_pairs<K: Into<String>, V: Into<String>>(
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            used: RefCell::default(),
        }
    }

    /// Later values win.
    pub fn merge(&mut self, overrides: &KvConfig) {
        for (k, v) in &overrides.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("`{key}` = `{v}`: {e}"))),
        }
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Keys under `prefix.` with the prefix stripped, marking them used.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        let dotted = format!("{prefix}.");
        let mut out = BTreeMap::new();
        for (k, v) in &self.entries {
            if let Some(rest) = k.strip_prefix(&dotted) {
                self.used.borrow_mut().insert(k.clone());
                out.insert(rest.to_string(), v.clone());
            }
        }
        out
    }

    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )))
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Canonical `key=value` rendering, sorted by key.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_tracks_usage() {
        let cfg =
            KvConfig::parse("# comment\ntrain.lr = 0.01\n\ntrain.epochs=3\nmystery=1\n").unwrap();
        assert_eq!(cfg.get::<f32>("train.lr").unwrap(), Some(0.01));
        assert_eq!(cfg.get_or("train.epochs", 1usize).unwrap(), 3);
        assert_eq!(cfg.get_or("train.batch", 32usize).unwrap(), 32);
        let err = cfg.reject_unknown().unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn bad_lines_and_values() {
        assert!(KvConfig::parse("no equals here").is_err());
        let cfg = KvConfig::parse("a=x").unwrap();
        assert!(cfg.get::<u32>("a").is_err());
    }

    #[test]
    fn merge_overrides() {
        let mut base = KvConfig::parse("a=1\nb=2").unwrap();
        base.merge(&KvConfig::from_pairs([("b", "3")]));
        assert_eq!(base.render(), "a=1\nb=3\n");
    }
}
