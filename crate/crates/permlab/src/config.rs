//! `key=value` run-configuration files.
//!
//! Blank lines and anything after `#` are ignored. Keys must be known to
//! the command reading the file; values are parsed exactly like the
//! matching command-line flag, and flags win over the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::FormatError;
use crate::error::{CliError, CliResult};

/// Environment variable consulted when no seed is given anywhere else.
pub const SEED_ENV: &str = "PERMLAB_SEED";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    source: String,
    values: BTreeMap<String, String>,
}

pub fn parse(text: &str) -> Result<BTreeMap<String, String>, FormatError> {
    let mut values = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| FormatError { line: i + 1, msg };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, found `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if values.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(format!("duplicate key `{k}`")));
        }
    }
    Ok(values)
}

impl ConfigFile {
    pub fn load(path: &Path, allowed: &[&str]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_text(&path.display().to_string(), &text, allowed)
    }

    pub fn from_text(source: &str, text: &str, allowed: &[&str]) -> CliResult<Self> {
        let values = parse(text).map_err(|e| CliError::Format {
            path: source.to_string(),
            msg: e.to_string(),
        })?;
        if let Some(bad) = values.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!(
                "{source}: unknown key `{bad}` (allowed: {})",
                allowed.join(", ")
            )));
        }
        Ok(ConfigFile {
            source: source.to_string(),
            values,
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("{}: bad value `{v}` for `{key}`: {e}", self.source)))
            })
            .transpose()
    }
}

/// `flag`, else the file's value, else `default`.
pub fn pick<T: FromStr>(flag: Option<T>, file: Option<&ConfigFile>, key: &str, default: T) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(v) = file.map(|f| f.get(key)).transpose()?.flatten() {
        return Ok(v);
    }
    Ok(default)
}

/// Seed precedence: flag, file, `PERMLAB_SEED`, then 0.
pub fn pick_seed(flag: Option<u64>, file: Option<&ConfigFile>) -> CliResult<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(seed) = file.map(|f| f.get("seed")).transpose()?.flatten() {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| CliError::Usage(format!("{SEED_ENV}: bad seed `{v}`: {e}"))),
        Err(_) => Ok(0),
    }
}
