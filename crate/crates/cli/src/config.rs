//! Run-config files: flags override file values, unknown keys are rejected,
//! and the resolved config is echoed next to the primary output.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: 2,
        message: message.into(),
    }
    .into()
}

pub fn metadata(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: 4,
        message: message.into(),
    }
    .into()
}

pub fn compat(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: 5,
        message: message.into(),
    }
    .into()
}

/// Value of a required option after merging.
pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> anyhow::Result<T> {
    v.clone().ok_or_else(|| usage(format!("missing required option --{flag}")))
}

/// `key = value` lines; values are read as JSON when they parse, else as
/// strings. Blank lines and `#` comments are skipped.
fn parse_key_values(text: &str) -> anyhow::Result<Map<String, Value>> {
    let mut map = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", i + 1)))?;
        let v = v.trim();
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        map.insert(k.trim().replace('-', "_"), value);
    }
    Ok(map)
}

fn read_config(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::Error::from(facemotion::Error::Io(e)).context(format!("reading {}", path.display())))?;
    if text.trim_start().starts_with('{') {
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(usage(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => Err(usage(format!("{}: {e}", path.display()))),
        }
    } else {
        parse_key_values(&text)
    }
}

/// Overlays the flags that were given on top of the config file.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let mut merged = read_config(path)?;
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// `<output>.config.json`, or `dir/<command>.config.json` for directories.
pub fn sidecar_path(output: &Path, command: &str) -> PathBuf {
    if output.is_dir() {
        output.join(format!("{command}.config.json"))
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".config.json");
        PathBuf::from(s)
    }
}

pub fn write_sidecar<T: Serialize>(resolved: &T, output: &Path, command: &str) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(resolved)?;
    text.push('\n');
    let path = sidecar_path(output, command);
    std::fs::write(&path, text)
        .map_err(|e| anyhow::Error::from(facemotion::Error::Io(e)).context(format!("writing {}", path.display())))
}
