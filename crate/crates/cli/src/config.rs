//! `key=value` config files and flag → file → default resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context};

/// Bad flags or config values. Mapped to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// keys may use `-` or `_`.
pub fn parse_config(text: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", i + 1)))?;
        out.insert(normalize(k), v.trim().to_string());
    }
    Ok(out)
}

/// Resolves each setting from its flag, then the config file, then the
/// default, and records the result for the run manifest.
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> anyhow::Result<Self> {
        let file = match config {
            Some(p) => parse_config(
                &fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            )?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| usage(format!("config key {key}: {e}")))
            })
            .transpose()
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> anyhow::Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v.to_string());
        }
        Ok(v)
    }

    pub fn get_list<T>(&mut self, key: &str, flag: Option<Vec<T>>, default: Vec<T>) -> anyhow::Result<Vec<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(s) => parse_list(s).map_err(|e| usage(format!("config key {key}: {e}")))?,
                None => default,
            },
        };
        self.record(key, join(&v));
        Ok(v)
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.push((key.to_string(), value));
    }

    /// `key=value` lines for every resolved setting, then any config keys
    /// this command did not use, commented out.
    pub fn manifest(&self, command: &str) -> String {
        let mut out = format!("command={command}\n");
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.file {
            if !self.resolved.iter().any(|(r, _)| r == k) {
                out.push_str(&format!("# unused: {k}={v}\n"));
            }
        }
        out
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow!("{p:?}: {e}")))
        .collect()
}

pub fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}
