//! Config documents: JSON with dotted-key overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use super::CliError;

/// Reads and parses a config file; syntax errors carry line and column.
pub fn load(path: Option<&Path>) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

pub fn parse(text: &str, origin: &str) -> Result<Value, CliError> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        CliError::Parse(format!("{origin}: line {} column {}: {e}", e.line(), e.column()))
    })?;
    if !value.is_object() {
        return Err(CliError::Validation("config: top level must be an object".into()));
    }
    Ok(value)
}

/// Applies `key=value` with a dotted key. The value is taken as JSON when it
/// parses and as a plain string otherwise.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Parse(format!("override `{spec}`: expected key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Parse(format!("override `{spec}`: empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => {
                return Err(CliError::Validation(format!(
                    "override `{spec}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one segment")
}

/// Deserializes `doc[section]`, naming the section in errors.
pub fn section<T: DeserializeOwned>(doc: &Value, section: &str) -> Result<Option<T>, CliError> {
    match doc.get(section) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| CliError::Validation(format!("{section}: {e}"))),
    }
}

pub fn required<T: DeserializeOwned>(doc: &Value, name: &str) -> Result<T, CliError> {
    section(doc, name)?.ok_or_else(|| CliError::Validation(format!("{name}: missing required section")))
}

/// The `experiment` section with every field defaulted.
pub fn experiment<T: DeserializeOwned + Default>(doc: &Value) -> Result<T, CliError> {
    Ok(section(doc, "experiment")?.unwrap_or_default())
}
