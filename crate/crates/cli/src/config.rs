//! Config resolution: defaults, then a JSON file, then `--seed` and `--set`.

use std::path::Path;

use serde_json::Value;
use wsod::engine::RunConfig;

/// Recursively merges `patch` into `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `key` (dotted path) in `root` from `raw`. The path must already exist.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), String> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| format!("unknown config key `{key}`"))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Resolves the run configuration and returns it with its JSON form.
pub fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<(RunConfig, Value), String> {
    let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| e.to_string())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        merge(&mut value, file);
    }
    if let Some(seed) = seed {
        value["train"]["seed"] = seed.into();
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| format!("override `{o}` is not of the form key=value"))?;
        apply_override(&mut value, key.trim(), raw.trim())?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| format!("config: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    let value = serde_json::to_value(&cfg).map_err(|e| e.to_string())?;
    Ok((cfg, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_deep() {
        let mut a = json!({"x": {"y": 1, "z": 2}, "w": 3});
        merge(&mut a, json!({"x": {"y": 5}}));
        assert_eq!(a, json!({"x": {"y": 5, "z": 2}, "w": 3}));
    }

    #[test]
    fn overrides_are_typed_and_checked() {
        let (cfg, _) = resolve_config(
            None,
            Some(4),
            &["train.lr=0.5".into(), "train.wscl=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.train.lr, 0.5);
        assert!(!cfg.train.wscl);
        assert!(resolve_config(None, None, &["train.nope=1".into()]).is_err());
        assert!(resolve_config(None, None, &["train.lr=fast".into()]).is_err());
        assert!(resolve_config(None, None, &["train.lr".into()]).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"lr": 0.002, "bogus": 1}}"#).unwrap();
        assert!(resolve_config(Some(&p), None, &[]).is_err());
        std::fs::write(&p, r#"{"train": {"lr": 0.002}}"#).unwrap();
        assert_eq!(
            resolve_config(Some(&p), None, &[]).unwrap().0.train.lr,
            0.002
        );
    }
}
