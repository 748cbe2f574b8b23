//! Flat `key = value` configuration text with `#` comments and dotted
//! keys. Serialization is canonical (sorted keys) so parse -> serialize ->
//! parse is the identity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> KvConfig {
        KvConfig::default()
    }

    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("{key}: '{v}' is not an integer"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("{key}: '{v}' is not an integer"))),
        }
    }

    pub fn get_f32(&self, key: &str, default: f32) -> Result<f32> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("{key}: '{v}' is not a number"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::config(format!("{key}: '{v}' is not a boolean"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_serialize_round_trip() {
        let text = "# comment\n b.key = 2 \n\na.key = hello world\nc = 1e-5\n";
        let cfg = KvConfig::parse(text).unwrap();
        let ser = cfg.serialize();
        assert_eq!(ser, "a.key = hello world\nb.key = 2\nc = 1e-5\n");
        let again = KvConfig::parse(&ser).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.serialize(), ser);
    }

    #[test]
    fn typed_getters() {
        let cfg = KvConfig::parse("n = 8\nlr = 1e-4\nflag = true\n").unwrap();
        assert_eq!(cfg.get_usize("n", 0).unwrap(), 8);
        assert_eq!(cfg.get_f32("lr", 0.0).unwrap(), 1e-4);
        assert!(cfg.get_bool("flag", false).unwrap());
        assert_eq!(cfg.get_usize("missing", 3).unwrap(), 3);
        assert!(cfg.get_usize("lr", 0).is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvConfig::parse("key without equals\n").is_err());
        assert!(KvConfig::parse("= value\n").is_err());
    }
}
