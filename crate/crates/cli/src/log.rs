//! JSON-lines logging on stdout.

use std::io::Write;

use serde_json::{Map, Value};

/// Prints `{"command":..,"event":..,<fields>}` as one line.
pub fn emit(command: &str, event: &str, fields: Value) {
    let mut line = Map::new();
    line.insert("command".into(), command.into());
    line.insert("event".into(), event.into());
    if let Value::Object(extra) = fields {
        line.extend(extra);
    }
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", Value::Object(line));
    let _ = out.flush();
}
