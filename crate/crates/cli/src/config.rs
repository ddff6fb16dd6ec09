//! Training config files: JSON, or `key = value` lines with dotted keys for
//! nested fields (`sampler.k = 4`).

use std::path::Path;

use serde_json::{Map, Value};
use tcpool::trainer::TrainConfig;

/// Reads a config file over `base`; keys the file omits keep their value
/// from `base`.
pub fn load(path: &Path, base: &TrainConfig) -> Result<TrainConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let overlay = parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut merged = serde_json::to_value(base).map_err(|e| e.to_string())?;
    merge(&mut merged, overlay);
    serde_json::from_value(merged).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse(text: &str) -> Result<Value, String> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return serde_json::from_str(trimmed).map_err(|e| format!("invalid JSON: {e}"));
    }
    let mut root = Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        let raw = raw.trim();
        // bare words are strings; anything JSON can read keeps its type
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut parts: Vec<&str> = key.trim().split('.').collect();
        let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| format!("line {}: empty key", n + 1))?;
        let mut node = &mut root;
        for p in parts {
            node = node
                .entry(p)
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .ok_or_else(|| format!("line {}: {p} is not a section", n + 1))?;
        }
        node.insert(last.to_string(), value);
    }
    Ok(Value::Object(root))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_nests_and_types() {
        let v = parse("# run\nepochs = 3\nsampler.k = 2\nnegative = vtc_jk_t_ik\n").unwrap();
        assert_eq!(v["epochs"], 3);
        assert_eq!(v["sampler"]["k"], 2);
        assert_eq!(v["negative"], "vtc_jk_t_ik");
        assert!(parse("nonsense").is_err());
    }

    #[test]
    fn partial_file_keeps_base_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 2, "sampler": {"k": 3}}"#).unwrap();
        let base = TrainConfig::default();
        let cfg = load(&path, &base).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.sampler.k, 3);
        assert_eq!(cfg.sampler.s, base.sampler.s);
        assert_eq!(cfg.lr, base.lr);
    }
}
