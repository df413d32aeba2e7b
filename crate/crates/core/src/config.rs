//! Flat `key = value` configuration files.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored;
//! whitespace around keys and values is trimmed. Later entries override
//! earlier ones, and command-line overrides are applied last.

use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn render_kv(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// A configuration that can be read from and echoed to key-value text.
pub trait KvConfig {
    /// Applies one entry. Returns `Ok(false)` when the key is not recognised.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError>;

    fn entries(&self) -> Vec<(String, String)>;

    fn apply(&mut self, entries: &[(String, String)]) -> Result<(), ConfigError> {
        for (k, v) in entries {
            if !self.set(k, v)? {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }

    fn to_kv_string(&self) -> String {
        render_kv(&self.entries())
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

/// Formats a float so it parses back to the identical value.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_comments() {
        let kv = parse_kv("# comment\n a = 1 \n\nb=x y\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x y".into())]);
        assert!(matches!(parse_kv("oops"), Err(ConfigError::Syntax { line: 1, .. })));
        assert_eq!(render_kv(&kv), "a = 1\nb = x y\n");
    }

    #[test]
    fn floats_round_trip() {
        for v in [5e-5, 0.1, 3e-4, 1.0, 0.030000000000000002] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
