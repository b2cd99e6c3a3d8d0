//! Layered configuration: built-in defaults, then a TOML file, then flags.
//! Every leaf key of a command's defaults becomes a `--dotted.key` flag, with
//! underscores spelled as hyphens.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Dotted paths of every non-object value, in document order.
pub fn leaf_keys(v: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &p, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(v, "", &mut out);
    out
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn get_path<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, k| cur.get(k))
}

fn set_path(v: &mut Value, path: &str, new: Value) {
    let mut cur = v;
    let parts: Vec<&str> = path.split('.').collect();
    for k in &parts[..parts.len() - 1] {
        if !cur.get(*k).is_some_and(Value::is_object) {
            cur[*k] = Value::Object(Map::new());
        }
        cur = cur.get_mut(*k).expect("just inserted");
    }
    cur[parts[parts.len() - 1]] = new;
}

/// Recursive merge; keys absent from `base` are added so that the final
/// typed parse can reject them.
pub fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Parses a flag value using the default's type as a guide.
pub fn parse_flag(key: &str, raw: &str, default: &Value) -> Result<Value, CliError> {
    let bad = || CliError::Usage(format!("--{}: cannot parse {raw:?}", flag_name(key)));
    let number = || -> Option<Value> {
        if let Ok(i) = raw.parse::<u64>() {
            return Some(Value::from(i));
        }
        if let Ok(i) = raw.parse::<i64>() {
            return Some(Value::from(i));
        }
        raw.parse::<f64>().ok().and_then(|f| serde_json::Number::from_f64(f).map(Value::Number))
    };
    Ok(match default {
        Value::Number(_) => number().ok_or_else(bad)?,
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.trim().to_string()))
                .collect(),
        ),
        _ => number()
            .or_else(|| raw.parse::<bool>().ok().map(Value::Bool))
            .unwrap_or_else(|| Value::String(raw.to_string())),
    })
}

/// Reads a TOML file as JSON. When the file has a table named after the
/// command (as written to `config.resolved`), only that table is used.
pub fn read_file(path: &Path, command: &str) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let parsed: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid TOML in {}: {e}", path.display())))?;
    let v = serde_json::to_value(parsed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(match v.get(command) {
        Some(section) if section.is_object() => section.clone(),
        _ => v,
    })
}

/// Defaults < file < flags, then a typed parse that rejects unknown keys.
pub fn resolve<C: Serialize + DeserializeOwned>(
    defaults: &Value,
    file: Option<&Value>,
    flags: &[(String, Value)],
) -> Result<(C, Value), CliError> {
    let mut v = defaults.clone();
    if let Some(f) = file {
        check_known(defaults, f, "")?;
        merge(&mut v, f);
    }
    for (k, val) in flags {
        set_path(&mut v, k, val.clone());
    }
    let typed: C = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    let canonical = serde_json::to_value(&typed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((typed, canonical))
}

// flattened structs swallow unknown fields, so compare against the defaults
fn check_known(defaults: &Value, file: &Value, prefix: &str) -> Result<(), CliError> {
    let (Value::Object(d), Value::Object(f)) = (defaults, file) else {
        return Ok(());
    };
    for (k, v) in f {
        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            Some(dv) => check_known(dv, v, &p)?,
            None => return Err(CliError::Usage(format!("unknown configuration key `{p}`"))),
        }
    }
    Ok(())
}

/// Drops nulls, which TOML cannot represent.
pub fn strip_nulls(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(_, x)| !x.is_null())
                .map(|(k, x)| (k.clone(), strip_nulls(x)))
                .collect(),
        ),
        other => other.clone(),
    }
}

pub fn to_toml(v: &Value) -> Result<String, CliError> {
    let table: toml::Table =
        serde_json::from_value(strip_nulls(v)).map_err(|e| CliError::Usage(format!("config is not a table: {e}")))?;
    toml::to_string(&table).map_err(|e| CliError::Usage(e.to_string()))
}
