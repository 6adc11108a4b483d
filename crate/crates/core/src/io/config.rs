use std::path::Path;

use super::read_bytes;
use crate::error::{Error, Result};
use crate::training::RunConfig;

/// Dotted field path of a deserialization error. A missing field is
/// reported at the field itself, e.g. `schedule.T`.
fn config_error(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let mut path = err.path().to_string();
    let message = err.inner().to_string();
    if let Some(rest) = message.strip_prefix("missing field `") {
        if let Some(field) = rest.split('`').next() {
            path = if path == "." || path.is_empty() { field.to_string() } else { format!("{path}.{field}") };
        }
    }
    Error::Config { path, message }
}

/// Parses and validates a training config.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(config_error)?;
    config.validate().map_err(|e| Error::Config { path: ".".into(), message: e.to_string() })?;
    Ok(config)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
    parse_run_config(&text)
}
