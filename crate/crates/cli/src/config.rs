//! `--config` support: keys of a flat JSON object become long flags that
//! are appended only when the command line does not already set them.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Context;
use serde_json::Value;

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn has_flag(args: &[OsString], flag: &str) -> bool {
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.strip_prefix(flag).is_some_and(|rest| rest.starts_with('='))
    })
}

fn scalar(v: &Value, key: &str) -> anyhow::Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(chorekit::Error::Invalid(format!("config key `{key}` must be a string, number or boolean")).into()),
    }
}

pub fn merge_config(mut args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else { return Ok(args) };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| chorekit::Error::Invalid(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(chorekit::Error::Invalid(format!("config {} must hold a JSON object", path.display())).into());
    };
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" || has_flag(&args, &flag) {
            continue;
        }
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => args.push(flag.into()),
            Value::Array(items) => {
                for item in &items {
                    args.push(flag.clone().into());
                    args.push(scalar(item, &key)?.into());
                }
            }
            other => {
                args.push(flag.into());
                args.push(scalar(&other, &key)?.into());
            }
        }
    }
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn explicit_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"seed": 7, "clips": 3, "lr_sweep": true, "skip": false}"#).unwrap();
        let args = os(&["chorekit", "gen-data", "--seed=1", "--config", cfg.to_str().unwrap()]);
        let merged: Vec<String> =
            merge_config(args).unwrap().iter().map(|a| a.to_string_lossy().into_owned()).collect();
        assert!(merged.contains(&"--seed=1".to_string()));
        assert!(!merged.contains(&"7".to_string()));
        assert!(merged.windows(2).any(|w| w[0] == "--clips" && w[1] == "3"));
        assert!(merged.contains(&"--lr-sweep".to_string()));
        assert!(!merged.contains(&"--skip".to_string()));
    }

    #[test]
    fn rejects_non_object() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, "[1, 2]").unwrap();
        assert!(merge_config(os(&["chorekit", "--config", cfg.to_str().unwrap()])).is_err());
    }
}
