//! TOML configuration with `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use toml::{Table, Value};
use umq_core::pipeline::UmqConfig;

use crate::error::{io, Error, Result};

/// Parsed configuration and which keys were given explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub config: UmqConfig,
    pub seed_given: bool,
    pub task_given: bool,
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `key=value` override; dotted keys address nested tables.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let mut value = parse_value(raw.trim());
    if key == "ablation" {
        if let Value::String(s) = &value {
            value = Value::Array(
                s.split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| Value::String(p.to_string()))
                    .collect(),
            );
        }
    }
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut t = table;
    for p in path {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

pub fn from_table(table: Table) -> Result<UmqConfig> {
    let config = UmqConfig::deserialize(Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?;
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(config)
}

/// Reads `path` (if any), then applies `overrides` in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Loaded> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let seed_given = table.contains_key("seed");
    let task_given = table.contains_key("task");
    Ok(Loaded {
        config: from_table(table)?,
        seed_given,
        task_given,
    })
}

pub fn to_toml(config: &UmqConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(e.to_string()))
}

pub fn parse_toml(text: &str) -> Result<UmqConfig> {
    from_table(toml::from_str::<Table>(text).map_err(|e| Error::Config(e.to_string()))?)
}
