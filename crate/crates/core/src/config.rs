//! Plain-text `key=value` configuration files.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Keys are dotted paths (`cov.1.2`), values are taken verbatim after
//! trimming. Duplicate keys are an error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    /// Removes and returns a raw value.
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => {
                v.parse::<T>().map(Some).map_err(|_| Error::Config(format!("key {key}: cannot parse value {v:?}")))
            }
        }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.entries.keys().cloned().collect();
            Err(Error::Config(format!("unknown config keys: {}", keys.join(", "))))
        }
    }
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("not a number: {t:?}"))))
        .collect()
}

pub fn format_f64_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_tracks_unknown_keys() {
        let mut kv = KeyValues::parse("# comment\n n = 10\n\ncov.1.2=0.1\nfoo=bar\n").unwrap();
        assert_eq!(kv.take_parsed::<usize>("n").unwrap(), Some(10));
        assert_eq!(kv.take_parsed::<f64>("cov.1.2").unwrap(), Some(0.1));
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let mut kv = KeyValues::parse("n=abc").unwrap();
        assert!(kv.take_parsed::<usize>("n").is_err());
    }

    #[test]
    fn float_lists() {
        assert_eq!(parse_f64_list("0, 1,-2.5").unwrap(), vec![0.0, 1.0, -2.5]);
        assert!(parse_f64_list("0,x").is_err());
        assert_eq!(format_f64_list(&[0.0, -1.6, 2.0]), "0,-1.6,2");
    }
}
