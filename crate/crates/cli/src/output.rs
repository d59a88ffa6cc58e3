//! Deterministic JSON and CSV rendering with 9 significant digits.

use align_criterion::scene::round_sig;
use serde::Serialize;
use serde_json::Value;

fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|x| serde_json::Number::from_f64(round_sig(x)))
            .map_or(Value::Null, Value::Number),
        Value::Array(items) => Value::Array(items.into_iter().map(round_value).collect()),
        Value::Object(map) => {
            Value::Object(map.into_iter().map(|(k, v)| (k, round_value(v))).collect())
        }
        other => other,
    }
}

/// Pretty JSON with every float rounded; keys are emitted in sorted order.
pub fn json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("output types serialize");
    let mut s = serde_json::to_string_pretty(&round_value(v)).expect("json values serialize");
    s.push('\n');
    s
}

/// A float as a CSV field; non-finite values become empty.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        round_sig(x).to_string()
    } else {
        String::new()
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, num)
}

pub struct Table(csv::Writer<Vec<u8>>);

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(headers).expect("in-memory write");
        Table(w)
    }

    pub fn row<S: AsRef<[u8]>>(&mut self, fields: impl IntoIterator<Item = S>) {
        self.0.write_record(fields).expect("in-memory write");
    }

    pub fn finish(self) -> String {
        String::from_utf8(self.0.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_are_rounded() {
        let s = json(&serde_json::json!({"b": 0.1234567891234, "a": [1, 2.0000000001]}));
        assert_eq!(
            s,
            "{\n  \"a\": [\n    1,\n    2.0\n  ],\n  \"b\": 0.123456789\n}\n"
        );
    }

    #[test]
    fn csv_fields() {
        let mut t = Table::new(&["x", "y"]);
        t.row([num(1.0 / 3.0), opt(None)]);
        t.row([num(f64::NAN), num(2.5)]);
        assert_eq!(t.finish(), "x,y\n0.333333333,\n,2.5\n");
    }
}
