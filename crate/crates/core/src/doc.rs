//! Shared helpers for the JSON documents (model, cluster, plan) the planner
//! reads and writes.

use serde::de::DeserializeOwned;
use std::fmt;

/// Location-aware failure to decode a structured document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    /// Dotted path of the offending field, `.` when unknown.
    pub field: String,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "parse error at line {}, column {} (field `{}`): {}",
            self.line, self.column, self.field, self.message
        )
    }
}

impl std::error::Error for ParseError {}

pub(crate) fn from_json<T: DeserializeOwned>(text: &str) -> Result<T, ParseError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ParseError {
            line: inner.line(),
            column: inner.column(),
            field,
            message: strip_position(&inner.to_string()),
        }
    })?;
    // Reject trailing garbage after the document.
    de.end().map_err(|e| ParseError {
        line: e.line(),
        column: e.column(),
        field: ".".to_string(),
        message: strip_position(&e.to_string()),
    })?;
    Ok(value)
}

// serde_json appends " at line X column Y"; we report those separately.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(idx) => msg[..idx].to_string(),
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    #[allow(dead_code)]
    struct Probe {
        items: Vec<Item>,
    }

    #[derive(Debug, Deserialize)]
    #[allow(dead_code)]
    struct Item {
        width: u32,
    }

    #[test]
    fn error_names_field_and_line() {
        let err = from_json::<Probe>("{\n \"items\": [\n  {\"width\": \"wide\"}\n ]\n}").unwrap_err();
        assert_eq!(err.line, 3);
        assert_eq!(err.field, "items[0].width");
        assert!(err.message.contains("invalid type"), "{}", err.message);
    }

    #[test]
    fn trailing_data_is_rejected() {
        let err = from_json::<Probe>("{\"items\": []} x").unwrap_err();
        assert_eq!(err.line, 1);
    }
}
