//! Campaign configuration files and `key=value` overrides.

use std::fs;
use std::path::Path;

use kftune_core::campaign::CampaignConfig;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Split `a.b.c=value` into its key path and value.
///
/// The value is parsed as JSON when possible (`3`, `true`, `[1,2]`,
/// `{"q":"em"}`), otherwise taken as a plain string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{text}' is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("override '{text}' has an empty key segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

/// Set `value` at `path`, creating intermediate objects.
pub fn apply_override(doc: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut slot = doc;
    for (i, key) in path.iter().enumerate() {
        if slot.is_null() {
            *slot = Value::Object(Map::new());
        }
        let obj = slot.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!("cannot set '{}': '{}' is not an object", path.join("."), path[..i].join(".")))
        })?;
        slot = obj.entry(key.clone()).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

/// Read an optional JSON config file, apply overrides, and resolve defaults.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<CampaignConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| CliError::Io {
                path: p.display().to_string(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|source| CliError::Json {
                context: p.display().to_string(),
                source,
            })?
        }
        None => Value::Object(Map::new()),
    };
    for text in overrides {
        let (key, value) = parse_override(text)?;
        apply_override(&mut doc, &key, value)?;
    }
    Ok(CampaignConfig::from_value(doc)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn override_values_parse_as_json_or_string() {
        let (k, v) = parse_override("tuning.max_iters=7").unwrap();
        assert_eq!(k, ["tuning", "max_iters"]);
        assert_eq!(v, json!(7));
        assert_eq!(parse_override("truth.q=[0.001,0.002]").unwrap().1, json!([0.001, 0.002]));
        assert_eq!(parse_override("tuning.estimator.q=em").unwrap().1, json!("em"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn overrides_nest_and_reject_scalars_in_the_path() {
        let mut doc = json!({"seed": 1});
        apply_override(&mut doc, &["tuning".into(), "n_sims".into()], json!(3)).unwrap();
        assert_eq!(doc, json!({"seed": 1, "tuning": {"n_sims": 3}}));
        assert!(apply_override(&mut doc, &["seed".into(), "x".into()], json!(3)).is_err());
    }

    #[test]
    fn unknown_override_keys_are_rejected() {
        let err = load_config(None, &["tuning.max_iter=3".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let cfg = load_config(None, &["truth.q=[0.001,0.002]".into(), "seed=9".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tuning.max_iters, 100);
    }
}
