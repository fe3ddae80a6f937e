//! Override strings of the form `param:value,param2:value2`.
//!
//! Values are typed like command-line inputs: integer, then float, then
//! bare string. Booleans are written `1` and `0`.

use thiserror::Error;

use crate::interpreter::Overrides;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverrideError {
    #[error("malformed override {pair:?}: {reason}")]
    Malformed { pair: String, reason: &'static str },
}

pub fn parse_override_string(raw: &str) -> Result<Overrides, OverrideError> {
    let mut out = Overrides::new();
    if raw.trim().is_empty() {
        return Ok(out);
    }
    for pair in raw.split(',') {
        let bad = |reason| OverrideError::Malformed {
            pair: pair.to_string(),
            reason,
        };
        let (key, value) = pair.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(bad("empty name"));
        }
        if value.is_empty() {
            return Err(bad("empty value"));
        }
        out.insert(key.to_string(), Value::parse_typed(value));
    }
    Ok(out)
}

/// Canonical text: names sorted, floats in shortest round-trip form.
///
/// `parse_override_string(&format_overrides(&m)) == m` for every `m`
/// returned by [`parse_override_string`].
pub fn format_overrides(overrides: &Overrides) -> String {
    overrides
        .iter()
        .map(|(k, v)| {
            let text = match v {
                Value::Str(s) => s.clone(),
                Value::Float(f) => format!("{f:?}"),
                Value::Bool(b) => i64::from(*b).to_string(),
                other => other.to_canonical(),
            };
            format!("{k}:{text}")
        })
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let m = parse_override_string("has_feed_stories:1").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m["has_feed_stories"], Value::Int(1));

        let m = parse_override_string("has_banner:1,has_feed_stories:0").unwrap();
        assert_eq!(m["has_banner"], Value::Int(1));
        assert_eq!(m["has_feed_stories"], Value::Int(0));

        let m = parse_override_string("p:0.5,text:I'm a voter,t:a:b").unwrap();
        assert_eq!(m["p"], Value::Float(0.5));
        assert_eq!(m["text"], Value::from("I'm a voter"));
        assert_eq!(m["t"], Value::from("a:b"));

        assert!(parse_override_string("").unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["x:", "x", ":1", "a:1,", "a:1,,b:2"] {
            assert!(parse_override_string(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn format_is_canonical() {
        let m = parse_override_string("b:2.50, a:1,c:x").unwrap();
        assert_eq!(format_overrides(&m), "a:1,b:2.5,c:x");
        assert_eq!(parse_override_string(&format_overrides(&m)).unwrap(), m);
        let f = parse_override_string("x:1e300,y:1.0").unwrap();
        assert_eq!(parse_override_string(&format_overrides(&f)).unwrap(), f);
    }
}
