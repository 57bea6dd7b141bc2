//! Flat `key = value` configuration files.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Keys use the same spelling as the matching command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_owned(), v.trim().to_owned()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    /// Fails on the first key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!(
                "unknown config key `{k}` (allowed: {})",
                allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let kv = KvFile::parse("# toy\nnum = 8\n\nvariant=dynamic-speed\n").unwrap();
        assert_eq!(kv.get::<usize>("num").unwrap(), Some(8));
        assert_eq!(kv.get::<String>("variant").unwrap().as_deref(), Some("dynamic-speed"));
        assert_eq!(kv.get::<usize>("seed").unwrap(), None);
        assert!(kv.get::<usize>("variant").is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvFile::parse("num 8").is_err());
        assert!(KvFile::parse("=8").is_err());
        assert!(KvFile::parse("a=1\na=2").is_err());
        let kv = KvFile::parse("a=1").unwrap();
        assert!(kv.check_keys(&["b"]).is_err());
        assert!(kv.check_keys(&["a", "b"]).is_ok());
    }
}
