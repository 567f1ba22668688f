//! Flat dotted-key configuration.
//!
//! Any serializable settings struct can be overridden key by key, e.g.
//! `pipeline.aac.lr = 0.1`. Values come from a TOML file (dotted keys or
//! nested tables, which are equivalent) and from `key=value` strings on the
//! command line; later sources win. Every key must already exist in the
//! defaults, so typos are reported instead of ignored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{DfqError, Result};

/// One override: a dotted key and either a typed value (from a file) or raw
/// text (from the command line) that is parsed against the default's type.
#[derive(Clone, Debug, PartialEq)]
pub enum Setting {
    Typed(Value),
    Text(String),
}

/// Ordered list of overrides; later entries win.
pub type Overrides = Vec<(String, Setting)>;

/// Every leaf of `value` under its dotted path.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, v) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(v, &key, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(value, "", &mut out);
    out
}

/// Parse a `key=value` argument.
pub fn parse_assignment(s: &str) -> Result<(String, Setting)> {
    let (k, v) = s.split_once('=').ok_or_else(|| {
        DfqError::InvalidArgument(format!("expected key=value, got '{s}'"))
    })?;
    let k = k.trim();
    if k.is_empty() {
        return Err(DfqError::InvalidArgument(format!("empty key in '{s}'")));
    }
    Ok((k.to_string(), Setting::Text(v.trim().to_string())))
}

/// Read a TOML file into overrides, flattened to dotted keys.
pub fn load_overrides(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path).map_err(|e| DfqError::io(path, e))?;
    parse_overrides(&text)
        .map_err(|e| DfqError::Format(format!("config {}: {e}", path.display())))
}

/// Parse TOML text into overrides, flattened to dotted keys.
pub fn parse_overrides(text: &str) -> Result<Overrides> {
    let table: toml::Table = toml::from_str(text).map_err(|e| DfqError::Format(e.to_string()))?;
    let value = serde_json::to_value(table).map_err(|e| DfqError::Format(e.to_string()))?;
    Ok(flatten(&value)
        .into_iter()
        .map(|(k, v)| (k, Setting::Typed(v)))
        .collect())
}

fn coerce(key: &str, current: &Value, setting: &Setting) -> Result<Value> {
    let bad = |why: &str| DfqError::InvalidArgument(format!("config key '{key}': {why}"));
    let text = match setting {
        Setting::Typed(Value::String(s)) if !current.is_string() => s.clone(),
        Setting::Typed(v) => return Ok(v.clone()),
        Setting::Text(s) => s.clone(),
    };
    Ok(match current {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad("expected true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = text.parse().map_err(|_| bad("expected a number"))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| bad("number must be finite"))?
        }
        Value::Number(_) => match text.parse::<u64>() {
            Ok(u) => Value::from(u),
            Err(_) => Value::from(text.parse::<f64>().map_err(|_| bad("expected a number"))?),
        },
        Value::Array(_) => Value::Array(
            text.split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| match p.parse::<u64>() {
                    Ok(u) => Value::from(u),
                    Err(_) => Value::String(p.to_string()),
                })
                .collect(),
        ),
        Value::Null => match text.parse::<f64>() {
            Ok(x) if text.parse::<u64>().is_err() => Value::from(x),
            Ok(_) => Value::from(text.parse::<u64>().unwrap()),
            Err(_) if text == "none" => Value::Null,
            Err(_) => Value::String(text),
        },
        _ => Value::String(text),
    })
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    for part in key.split('.') {
        node = &mut node[part];
    }
    *node = value;
}

/// Apply `overrides` to `base`, returning the new settings.
///
/// Unknown keys and values that do not fit the field are rejected.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, overrides: &[(String, Setting)]) -> Result<T> {
    let mut root = serde_json::to_value(base).map_err(|e| DfqError::Format(e.to_string()))?;
    let known = flatten(&root);
    for (key, setting) in overrides {
        let current = known.get(key).ok_or_else(|| {
            DfqError::InvalidArgument(format!("unknown config key '{key}'"))
        })?;
        let v = coerce(key, current, setting)?;
        set_path(&mut root, key, v);
    }
    serde_json::from_value(root)
        .map_err(|e| DfqError::InvalidArgument(format!("invalid configuration: {e}")))
}

/// Render settings as flat `key = value` TOML, one line per leaf.
pub fn to_dotted_toml<T: Serialize>(settings: &T) -> Result<String> {
    let root = serde_json::to_value(settings).map_err(|e| DfqError::Format(e.to_string()))?;
    let mut s = String::new();
    for (k, v) in flatten(&root) {
        if v.is_null() {
            continue;
        }
        let tv: toml::Value = serde_json::from_value(v).map_err(|e| DfqError::Format(e.to_string()))?;
        s += &format!("{k} = {tv}\n");
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PipelineConfig, Step};

    #[test]
    fn text_overrides_follow_field_types() {
        let base = PipelineConfig::default();
        let o: Overrides = ["bits=8", "aac.lr=0.05", "steps=clip", "bn_policy=ema:0.2"]
            .iter()
            .map(|s| parse_assignment(s).unwrap())
            .collect();
        let c = apply(&base, &o).unwrap();
        assert_eq!(c.bits, 8);
        assert_eq!(c.aac.lr, 0.05);
        assert_eq!(c.steps, [Step::Clip].into());
        assert_eq!(c.bn_policy.to_string(), "ema:0.2");
    }

    #[test]
    fn file_values_and_dotted_tables_agree() {
        let a = parse_overrides("bits = 8\naac.iterations = 3\n").unwrap();
        let b = parse_overrides("bits = 8\n[aac]\niterations = 3\n").unwrap();
        assert_eq!(a, b);
        let c = apply(&PipelineConfig::default(), &a).unwrap();
        assert_eq!(c.aac.iterations, 3);
    }

    #[test]
    fn later_overrides_win() {
        let o = vec![
            ("bits".to_string(), Setting::Typed(Value::from(8))),
            ("bits".to_string(), Setting::Text("6".into())),
        ];
        assert_eq!(apply(&PipelineConfig::default(), &o).unwrap().bits, 6);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let base = PipelineConfig::default();
        let e = apply(&base, &[parse_assignment("aac.learning_rate=1").unwrap()]).unwrap_err();
        assert!(e.to_string().contains("unknown config key"));
        assert!(apply(&base, &[parse_assignment("bits=four").unwrap()]).is_err());
        assert!(apply(&base, &[parse_assignment("aac.loss_kind=hinge").unwrap()]).is_err());
        assert!(parse_assignment("bits").is_err());
    }

    #[test]
    fn dotted_rendering_round_trips() {
        let mut base = PipelineConfig::default();
        base.bits = 6;
        base.fine_tune.epochs = 2;
        let text = to_dotted_toml(&base).unwrap();
        let back = apply(&PipelineConfig::default(), &parse_overrides(&text).unwrap()).unwrap();
        assert_eq!(back, base);
    }
}
