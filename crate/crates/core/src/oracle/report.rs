use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Flat `key=value` lines, sorted by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationReport {
    entries: BTreeMap<String, String>,
}

impl VerificationReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: VerificationReport) {
        self.entries.extend(other.entries);
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("report line {}: missing '='", n + 1)))?;
            out.set(k.trim(), v.trim());
        }
        Ok(out)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut r = VerificationReport::new();
        r.set("collapse.max_rel_dev", 0.0);
        r.set("fd.max_rel_err", 3.5e-9);
        r.set("fd.instances", 100);
        let back = VerificationReport::parse(&r.to_string()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get_f64("fd.max_rel_err"), Some(3.5e-9));
        assert!(VerificationReport::parse("nonsense").is_err());
    }
}
