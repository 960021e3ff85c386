//! `--config` files: a flat JSON object whose keys are flag names
//! (`learning_rate` or `learning-rate`). Flags given on the command line win.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Default)]
pub struct Settings {
    values: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("BAD_CONFIG", format!("{}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(values)) => Ok(Self {
                values: values.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect(),
            }),
            Ok(_) => Err(CliError::usage("BAD_CONFIG", format!("{}: expected a JSON object", path.display()))),
            Err(e) => Err(CliError::usage("BAD_CONFIG", format!("{}: {e}", path.display()))),
        }
    }

    /// The flag value if given, else the config entry, else `None`.
    pub fn merge<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| CliError::usage("BAD_CONFIG", format!("config key {key:?}: {e}"))),
        }
    }

    pub fn or<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.merge(flag, key)?.unwrap_or(default))
    }

    pub fn required<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T, CliError> {
        self.merge(flag, key)?
            .ok_or_else(|| CliError::usage("MISSING_ARGUMENT", format!("--{} is required", key.replace('_', "-"))))
    }
}
