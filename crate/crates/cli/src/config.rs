//! Layered settings: struct defaults, then the config file, then flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// A parsed TOML config file, held as JSON values for merging.
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err(format!("{}: {}", path.display(), e.message())))?;
        match serde_json::to_value(table).map_err(fairreg::Error::from)? {
            Value::Object(root) => Ok(Self { root }),
            _ => Err(config_err(format!("{} is not a table", path.display()))),
        }
    }

    /// Keys of `[name]`; empty when the section is absent.
    pub fn section(&self, name: &str) -> Result<Map<String, Value>, CliError> {
        match self.root.get(name) {
            None => Ok(Map::new()),
            Some(Value::Object(m)) => Ok(m.clone()),
            Some(_) => Err(config_err(format!("[{name}] must be a table"))),
        }
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.root.contains_key(name)
    }

    /// The whole file as one section.
    pub fn root(&self) -> Map<String, Value> {
        self.root.clone()
    }
}

fn config_err(msg: String) -> CliError {
    CliError::Lib(fairreg::Error::Config(msg))
}

/// Recursively overlays `over` onto `base`.
pub fn merge(base: &mut Map<String, Value>, over: Map<String, Value>) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `defaults` overlaid with each layer in order; unknown keys are rejected
/// by the target type.
pub fn layered<T: Serialize + DeserializeOwned>(
    defaults: &T,
    layers: impl IntoIterator<Item = Map<String, Value>>,
) -> Result<T, CliError> {
    let mut base = match serde_json::to_value(defaults).map_err(fairreg::Error::from)? {
        Value::Object(m) => m,
        _ => unreachable!("settings serialize to objects"),
    };
    for layer in layers {
        merge(&mut base, layer);
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| config_err(e.to_string()))
}

/// Removes `key` from `section` and parses it as `T`.
pub fn take<T: DeserializeOwned>(section: &mut Map<String, Value>, key: &str) -> Result<Option<T>, CliError> {
    match section.remove(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| config_err(format!("{key}: {e}"))),
    }
}

/// Flag values that were given, keyed by settings field.
#[derive(Debug, Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set(mut self, key: &str, value: Option<impl Serialize>) -> Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    pub fn nest(mut self, key: &str, inner: Flags) -> Self {
        if !inner.0.is_empty() {
            self.0.insert(key.to_string(), Value::Object(inner.0));
        }
        self
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}
