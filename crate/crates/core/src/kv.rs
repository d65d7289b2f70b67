//! Flat `key = value` text documents.
//!
//! Used for encoder configs, schedules, distillation recipes, grids and score
//! files. Blank lines and lines starting with `#` are ignored. Keys keep their
//! file order so that serialization is stable.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDocument {
    entries: Vec<(String, String)>,
}

impl KvDocument {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDocument::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::data("<kv>", lineno + 1, format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::data("<kv>", lineno + 1, "empty key"));
            }
            if doc.get(key).is_some() {
                return Err(Error::data("<kv>", lineno + 1, format!("duplicate key {key:?}")));
            }
            doc.entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Data { line, message, .. } => Error::data(path, line, message),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn set_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let joined = values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        self.set(key, joined);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("cannot parse {key} = {raw:?}")))
    }

    pub fn optional<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.require(key),
        }
    }

    pub fn require_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse list item {item:?} in {key}")))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let doc = KvDocument::parse("# header\nalpha = 1.5\n\nlist = 1, 2,3\n").unwrap();
        assert_eq!(doc.require::<f64>("alpha").unwrap(), 1.5);
        assert_eq!(doc.require_list::<usize>("list").unwrap(), vec![1, 2, 3]);
        assert!(doc.require::<f64>("missing").is_err());
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvDocument::parse("a = 1\na = 2\n").is_err());
        assert!(KvDocument::parse("no equals sign\n").is_err());
    }

    #[test]
    fn render_is_stable() {
        let mut doc = KvDocument::new();
        doc.set("b", 2);
        doc.set("a", 0.1);
        doc.set("b", 3);
        let text = doc.render();
        assert_eq!(text, "b = 3\na = 0.1\n");
        assert_eq!(KvDocument::parse(&text).unwrap(), doc);
    }
}
