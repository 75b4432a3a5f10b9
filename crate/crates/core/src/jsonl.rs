//! JSONL reading with optional artifact headers.
//!
//! Emitted artifacts carry a first line `{"artifact":...,...}` holding
//! content hashes and run parameters; readers skip any such header lines so
//! plain record-only files remain valid inputs.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{Error, Result};

/// Parse every record line of a JSONL file, skipping header lines.
pub fn read_records<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

/// Parse records from in-memory JSONL text.
pub fn parse_records<T: DeserializeOwned>(text: &str) -> std::result::Result<Vec<T>, String> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(line).map_err(|e| format!("line {}: {e}", lineno + 1))?;
        if value.get("artifact").is_some() {
            continue;
        }
        let record =
            T::deserialize(value).map_err(|e| format!("line {}: {e}", lineno + 1))?;
        records.push(record);
    }
    Ok(records)
}
