//! Flat dotted-key JSON configs, e.g. `{"selector.top_n": 50}`.
//!
//! Nested objects are accepted on input and may be mixed with dotted keys.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Flattens nested objects into dotted keys. Arrays and scalars are leaves.
pub fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

/// Rebuilds nesting from dotted keys, merging with nested objects.
pub fn unflatten(value: &Value) -> Result<Value> {
    let Value::Object(map) = value else {
        return Err(Error::InvalidArgument("config must be a JSON object".into()));
    };
    let mut root = Map::new();
    for (k, v) in flatten(&Value::Object(map.clone())) {
        set_path(&mut root, &k, v)?;
    }
    Ok(Value::Object(root))
}

/// Sets `key` (dotted) in a nested object, creating parents as needed.
pub fn set_path(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::InvalidArgument(format!("bad config key `{key}`")));
        }
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let child = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        node = child
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("config key `{key}` conflicts with a value")))?;
    }
    Ok(())
}

pub fn from_value<T: DeserializeOwned>(value: &Value) -> Result<T> {
    Ok(serde_json::from_value(unflatten(value)?)?)
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    from_value(&value)
}

/// Writes `config` as a pretty-printed flat object with sorted keys.
pub fn save_flat<T: Serialize>(config: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let flat = flatten(&serde_json::to_value(config)?);
    let mut text = serde_json::to_string_pretty(&Value::Object(flat))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
