//! JSON config files with `key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Starts from `T::default()`, merges the file (if any), then each override.
/// Keys are dotted paths; values parse as JSON and fall back to strings.
pub fn load<T>(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut doc = serde_json::to_value(T::default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut doc, file, "")?;
    }
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{ov}` is not of the form key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set(&mut doc, key, value)?;
    }
    serde_json::from_value(doc).map_err(|e| anyhow!("invalid config: {e}"))
}

fn merge(doc: &mut Value, patch: Value, prefix: &str) -> anyhow::Result<()> {
    match (doc, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (k, v) in patch {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match base.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => bail!("unknown config key `{path}`"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set(doc: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut slot = doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    *slot = value;
    Ok(())
}
