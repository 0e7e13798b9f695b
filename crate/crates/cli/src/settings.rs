//! Settings file handling: `key = value` lines, overridden by flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nmr_core::config::{lookup, parse_key_values, reject_unknown};

use crate::Failure;

#[derive(Debug, Default)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(p) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(p).map_err(|e| {
            Failure::Usage(format!("cannot read settings file {}: {e}", p.display()))
        })?;
        let map =
            parse_key_values(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        Ok(Self { map })
    }

    /// Reject keys the running command does not understand.
    pub fn restrict(&self, known: &[&str]) -> Result<(), Failure> {
        let prefixed: Vec<&str> = self
            .map
            .keys()
            .filter(|k| known.iter().any(|p| p.ends_with('.') && k.starts_with(p)))
            .map(String::as_str)
            .collect();
        let all: Vec<&str> = known.iter().copied().chain(prefixed).collect();
        reject_unknown(&self.map, &all).map_err(|e| Failure::Usage(e.to_string()))
    }

    /// Flag value, else file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure> {
        if let Some(v) = flag {
            return Ok(v);
        }
        Ok(lookup(&self.map, key)
            .map_err(|e| Failure::Usage(e.to_string()))?
            .unwrap_or(default))
    }

    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.map
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v.as_str())))
    }
}
