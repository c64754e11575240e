//! Flat `key = value` configuration text with dotted keys.
//!
//! ```text
//! # comment
//! train.lambda = 1e-5
//! arch.latent_dim = 128
//! ```

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses config text into ordered `(key, value)` pairs.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidValue {
            key: format!("line {}", lineno + 1),
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::InvalidValue {
                key: format!("line {}", lineno + 1),
                message: "empty key".into(),
            });
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Renders pairs back to text, one per line.
pub fn render(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub fn value<T>(key: &str, raw: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    raw.trim().parse().map_err(|e: T::Err| Error::InvalidValue {
        key: key.to_string(),
        message: format!("`{raw}`: {e}"),
    })
}

pub fn list<T>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| value(key, p)).collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Formats a float so that parsing it back yields the same value.
pub fn float(x: f64) -> String {
    format!("{x:?}")
}
