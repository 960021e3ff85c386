use serde::ser::{Serialize, SerializeMap, Serializer};
use serde_json::Value;

/// Ordered key/value output of a command. Serialized as a JSON object;
/// the text form is one line of `key=value` for the scalar entries.
#[derive(Debug, Default)]
pub struct Report {
    entries: Vec<(String, Value)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).expect("report values serialize");
        self.entries.push((key.to_string(), v));
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let parts: Vec<String> = self
            .entries
            .iter()
            .filter_map(|(k, v)| match v {
                Value::Number(n) => Some(format!("{k}={}", significant(n.as_f64().unwrap_or(f64::NAN)))),
                Value::String(s) => Some(format!("{k}={s}")),
                Value::Bool(b) => Some(format!("{k}={b}")),
                _ => None,
            })
            .collect();
        parts.join(" ")
    }
}

impl Serialize for Report {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.entries.len()))?;
        for (k, v) in &self.entries {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

/// `x` rounded to 12 significant digits, printed without trailing zeros.
pub fn significant(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let r: f64 = format!("{x:.11e}").parse().expect("own formatting parses");
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}
