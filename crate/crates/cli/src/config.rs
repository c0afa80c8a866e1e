//! Option layering: values from a TOML or JSON file, then flags on top.
//!
//! Every command's options are one struct whose fields are all optional.
//! The file is parsed into that struct (unknown keys are rejected), both
//! layers are turned into JSON objects, and every key the command line set
//! replaces the file's value. A file repeating a flag's value therefore
//! resolves to exactly what the flag alone gives. Paths in a file are taken
//! relative to the working directory, like paths given as flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

fn to_object(v: &impl Serialize) -> CliResult<Map<String, Value>> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::usage("options must form a table")),
        Err(e) => Err(CliError::usage(e.to_string())),
    }
}

/// Parses a config file into `T`, choosing the format by extension
/// (`.json`, otherwise TOML).
pub fn read_file<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("config file {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::usage(format!("config file {}: {e}", path.display())))
}

/// Overlays the non-null fields of `flags` on the file's values.
pub fn layer<T: Serialize + DeserializeOwned>(file: Option<&T>, flags: &T) -> CliResult<T> {
    let mut merged = match file {
        Some(f) => to_object(f)?,
        None => Map::new(),
    };
    for (k, v) in to_object(flags)? {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(e.to_string()))
}

pub fn resolve<T: Serialize + DeserializeOwned>(config: Option<&Path>, flags: &T) -> CliResult<T> {
    let file = config.map(read_file::<T>).transpose()?;
    layer(file.as_ref(), flags)
}
