//! Plain-text `key = value` configuration files.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parse `key = value` lines. Blank lines and `#` comments are ignored;
/// repeated keys are an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i as u64 + 1,
            message: format!("expected key = value, got '{line}'"),
        })?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::Parse {
                line: i as u64 + 1,
                message: "empty key".into(),
            });
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("key '{k}' given twice")));
        }
    }
    Ok(out)
}

/// Typed lookup; `Ok(None)` when the key is absent.
pub fn lookup<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'"))),
    }
}

/// Fail on keys outside `known`.
pub fn reject_unknown(map: &BTreeMap<String, String>, known: &[&str]) -> Result<()> {
    for k in map.keys() {
        if !known.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
    }
    Ok(())
}
