//! Tiny `key=value` header codec used by checkpoints and backend containers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "header line {} is not key=value: {line:?}",
                lineno + 1
            ))
        })?;
        if map
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!("duplicate header key {k:?}")));
        }
    }
    Ok(map)
}

pub fn kv_get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Config(format!("missing header key {key:?}")))
}

pub fn kv_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    kv_get(map, key)?
        .parse()
        .map_err(|_| Error::Config(format!("header key {key:?} is not an integer")))
}

pub fn kv_f64(map: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    kv_get(map, key)?
        .parse()
        .map_err(|_| Error::Config(format!("header key {key:?} is not a number")))
}
