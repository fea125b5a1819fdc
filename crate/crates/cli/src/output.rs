//! Deterministic report formatting and atomic file output.

use std::path::Path;

use layerfuse::container::write_atomic;
use serde::Serialize;
use serde_json::Value;

/// `x` rounded to 9 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with sorted keys and 9-digit floats.
pub fn canonical_json(value: &impl Serialize) -> String {
    let mut v = serde_json::to_value(value).expect("serializable report");
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("json value");
    s.push('\n');
    s
}

pub fn write_json(path: &Path, value: &impl Serialize) -> layerfuse::Result<()> {
    write_atomic(path, canonical_json(value).as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> layerfuse::Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Number formatted for CSV output.
pub fn num(x: f64) -> String {
    format!("{}", round_sig(x))
}
