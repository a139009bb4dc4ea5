//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Later assignments override earlier ones, which is how CLI overrides are
//! layered on top of a file.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Anything configurable from flat key/value pairs.
pub trait FlatConfig {
    /// Applies one assignment; unknown keys are an error.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Renders the config in the format [`parse_pairs`] reads.
    fn to_flat(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, "<config>", format!("expected `key = value`, got `{line}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(i + 1, "<config>", "empty key"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `key=value` as given on a command line.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub(crate) fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
