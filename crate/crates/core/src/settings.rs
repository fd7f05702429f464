//! TOML configuration files with environment overrides.
//!
//! A variable `PREFIX_A__B` sets key `b` of table `a`. Values are parsed as
//! TOML when possible (`8`, `true`, `"x"`, `[1, 2]`) and taken as strings
//! otherwise.

use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "SERVO_";

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("override {key}: {reason}")]
    Override { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parses an override value.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies `vars` whose names start with `prefix` to `table`.
pub fn apply_overrides(
    table: &mut Table,
    prefix: &str,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), SettingsError> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(prefix)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[prefix.len()..].split("__").map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(SettingsError::Override { key, reason: "empty path segment".into() });
        }
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut t = &mut *table;
        for p in parents {
            let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
            t = match entry {
                Value::Table(inner) => inner,
                _ => return Err(SettingsError::Override { key, reason: format!("{p} is not a table") }),
            };
        }
        t.insert(last.clone(), parse_value(&raw));
    }
    Ok(())
}

/// Parses `text`, applies overrides and deserializes.
pub fn from_str_with<T: DeserializeOwned>(
    text: &str,
    origin: &str,
    prefix: &str,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<T, SettingsError> {
    let parse = |source| SettingsError::Parse { path: origin.into(), source };
    let mut table: Table = text.parse().map_err(parse)?;
    apply_overrides(&mut table, prefix, vars)?;
    Value::Table(table).try_into().map_err(parse)
}

/// Loads `path` (or an empty document) with overrides from the process
/// environment.
pub fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<T, SettingsError> {
    let (text, origin) = match path {
        Some(p) => (
            std::fs::read_to_string(p)
                .map_err(|source| SettingsError::Read { path: p.display().to_string(), source })?,
            p.display().to_string(),
        ),
        None => (String::new(), "<defaults>".into()),
    };
    from_str_with(&text, &origin, ENV_PREFIX, std::env::vars())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::{ScMode, ServerConfig};

    fn vars(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn values_parse_as_toml_or_strings() {
        assert_eq!(parse_value("8"), Value::Integer(8));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("2.5"), Value::Float(2.5));
        assert_eq!(parse_value("offloaded"), Value::String("offloaded".into()));
        assert_eq!(parse_value("0.0.0.0:1"), Value::String("0.0.0.0:1".into()));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c: ServerConfig = from_str_with(
            "tick_rate_hz = 10\n",
            "t",
            "SERVO_",
            vars(&[
                ("SERVO_SC_MODE", "offloaded"),
                ("SERVO_OFFLOAD__TICK_LEAD", "10"),
                ("SERVO_STORAGE__CACHE__ENABLED", "false"),
                ("OTHER_TICK_RATE_HZ", "99"),
            ]),
        )
        .unwrap();
        assert_eq!(c.tick_rate_hz, 10);
        assert_eq!(c.sc_mode, ScMode::Offloaded);
        assert_eq!(c.offload.tick_lead, 10);
        assert!(!c.storage.cache.enabled);
    }

    #[test]
    fn bad_overrides_are_reported() {
        let r: Result<ServerConfig, _> =
            from_str_with("tick_rate_hz = 10\n", "t", "SERVO_", vars(&[("SERVO_TICK_RATE_HZ__X", "1")]));
        assert!(matches!(r, Err(SettingsError::Override { .. })));
        let r: Result<ServerConfig, _> =
            from_str_with("", "t", "SERVO_", vars(&[("SERVO_TICK_RATE_HZ", "fast")]));
        assert!(matches!(r, Err(SettingsError::Parse { .. })));
    }
}
