//! `key=value` text format shared by dataset manifests, run configs and
//! checkpoint headers: UTF-8, one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("manifest", format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::format("manifest", format!("line {}: empty key", lineno + 1)));
            }
            if entries.iter().any(|(e, _)| e == k) {
                return Err(Error::format("manifest", format!("duplicate key {k:?}")));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Manifest { entries })
    }

    /// Insert or replace, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::format("manifest", format!("missing key {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::format("manifest", format!("bad value {raw:?} for {key:?}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn as_map(&self) -> BTreeMap<&str, &str> {
        self.iter().collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_round_trips() {
        let m = Manifest::parse("# header\nseed = 7\n\nclasses=5 # trailing\n").unwrap();
        assert_eq!(m.get("seed"), Some("7"));
        assert_eq!(m.require::<usize>("classes").unwrap(), 5);
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert!(m.require::<usize>("missing").is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Manifest::parse("novalue\n").is_err());
        assert!(Manifest::parse("=3\n").is_err());
        assert!(Manifest::parse("a=1\na=2\n").is_err());
    }
}
