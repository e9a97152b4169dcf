//! Flag / config-file / default layering.
//!
//! A config file is a JSON object with one optional section per
//! subcommand, keyed by the subcommand name. Section keys are the long flag
//! names with underscores. Explicit flags win over the file, and the file
//! wins over built-in defaults, which are applied after merging.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const SECTIONS: [&str; 6] = ["synthesize", "rectify", "distort", "estimate", "gradcheck", "evaluate"];

pub fn load(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Some(obj) = value.as_object() else {
        bail!("config {} must be a JSON object", path.display());
    };
    for key in obj.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            bail!("config {}: unknown section \"{key}\" (expected one of {})", path.display(), SECTIONS.join(", "));
        }
    }
    Ok(value)
}

/// Overlays the flags that were given on top of `config[section]`.
///
/// `T` must skip unset fields when serialized (`None`, `false`), otherwise
/// an absent flag would mask the config value.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Value>, section: &str) -> Result<T> {
    let mut merged = match config.and_then(|c| c.get(section)) {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => bail!("config section \"{section}\" must be an object"),
        None => Map::new(),
    };
    match serde_json::to_value(flags)? {
        Value::Object(m) => merged.extend(m),
        _ => unreachable!("option structs serialize to objects"),
    }
    serde_json::from_value(Value::Object(merged)).with_context(|| format!("invalid \"{section}\" options"))
}
