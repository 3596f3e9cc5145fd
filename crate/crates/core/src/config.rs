//! Flat `key = value` configuration over nested serde structs.
//!
//! Keys are dotted paths into the struct's JSON form (`world.n_users`). A
//! file may only set keys that exist in the defaults; values are parsed
//! according to the type of the default they replace.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
/// A key given twice is an error.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: key {k} set twice", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Every leaf of `value` under its dotted path.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

fn parse_leaf(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    // an optional number may be unset again; non-optional fields reject the null on deserialisation
    if raw == "none" && matches!(current, Value::Null | Value::Number(_)) {
        return Ok(Value::Null);
    }
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::Number(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.into()),
        Value::Number(n) if n.is_i64() => Value::Number(raw.parse::<i64>().map_err(|_| bad("an integer"))?.into()),
        Value::Number(_) => number(raw).ok_or_else(|| bad("a finite number"))?,
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null => number(raw).ok_or_else(|| bad("a number or none"))?,
        Value::Array(_) | Value::Object(_) => return Err(Error::Config(format!("{key} is not a settable key"))),
    })
}

fn number(raw: &str) -> Option<Value> {
    raw.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number)
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .expect("path checked against the flattened defaults");
    }
    *cur = value;
}

/// `defaults` with every override applied. Unknown keys and values of the
/// wrong type are config errors, as is any result the target type rejects.
pub fn apply<T: Serialize + DeserializeOwned>(defaults: &T, overrides: &[(String, String)]) -> Result<T> {
    let mut root = serde_json::to_value(defaults).map_err(|e| Error::Internal(e.to_string()))?;
    let leaves = flatten(&root);
    for (k, raw) in overrides {
        let Some(current) = leaves.get(k) else {
            return Err(Error::Config(format!("unknown config key {k}")));
        };
        set_path(&mut root, k, parse_leaf(k, current, raw)?);
    }
    serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
}

/// Reads a flat config file on top of `defaults`.
pub fn load<T: Serialize + DeserializeOwned>(defaults: &T, path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply(defaults, &parse_flat(&text)?)
}

/// `key = value` lines for every leaf, in key order.
pub fn render<T: Serialize>(cfg: &T) -> Result<String> {
    let root = serde_json::to_value(cfg).map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = String::new();
    for (k, v) in flatten(&root) {
        let v = match v {
            Value::Null => "none".to_string(),
            Value::String(s) => s,
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {v}\n"));
    }
    Ok(out)
}

/// FNV-1a of the canonical (sorted-key) JSON form, as 16 hex digits.
pub fn hash<T: Serialize>(cfg: &T) -> String {
    crate::data::config_hash(cfg)
}
