//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique; a
//! repeated key is an error so that fixtures stay unambiguous.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: idx + 1,
                reason: format!("expected `key = value`, found `{line}`"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                line: idx + 1,
                reason: "empty key".into(),
            });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config {
                key,
                reason: "duplicate key".into(),
            });
        }
    }
    Ok(out)
}

/// Parses `value` for `key`, reporting the key on failure.
pub fn typed<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        reason: format!("cannot parse `{value}`"),
    })
}

pub fn unknown_key(key: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: "unknown key".into(),
    }
}

pub fn check(key: &str, ok: bool, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config {
            key: key.to_string(),
            reason: reason.to_string(),
        })
    }
}

/// Renders `(key, value)` pairs one per line.
pub fn render_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let m = parse_kv("# c\n a = 1 \n\nb=two\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "two");
        assert!(matches!(parse_kv("a = 1\na = 2"), Err(Error::Config { .. })));
        assert!(matches!(parse_kv("x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(typed::<u32>("frames", "-3"), Err(Error::Config { key, .. }) if key == "frames"));
    }
}
