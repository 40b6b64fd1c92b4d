//! Shared TOML plumbing: located error messages and small value parsers.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::de::{self, DeserializeOwned, Deserializer, Visitor};
use thiserror::Error;

/// A configuration problem, located by line where possible.
#[derive(Debug, Clone, Error, PartialEq)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.origin, line, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

impl ConfigError {
    pub fn new(origin: &str, line: Option<usize>, message: impl Into<String>) -> Self {
        ConfigError {
            origin: origin.to_string(),
            line,
            message: message.into(),
        }
    }
}

/// 1-based line number of a byte offset.
pub fn line_of(source: &str, offset: usize) -> usize {
    let end = offset.min(source.len());
    source.as_bytes()[..end].iter().filter(|&&b| b == b'\n').count() + 1
}

/// Source text plus its name, used to turn spans into line numbers.
#[derive(Clone, Copy)]
pub struct Source<'a> {
    pub origin: &'a str,
    pub text: &'a str,
}

impl<'a> Source<'a> {
    pub fn new(origin: &'a str, text: &'a str) -> Self {
        Source { origin, text }
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, ConfigError> {
        toml::from_str(self.text).map_err(|e| {
            let line = e.span().map(|s| line_of(self.text, s.start));
            ConfigError::new(self.origin, line, e.message().trim().to_string())
        })
    }

    pub fn error_at(&self, span: Range<usize>, message: impl Into<String>) -> ConfigError {
        ConfigError::new(self.origin, Some(line_of(self.text, span.start)), message)
    }

    pub fn error(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::new(self.origin, None, message)
    }
}

pub fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(&path.display().to_string(), None, format!("cannot read file: {e}")))
}

/// Parses a fraction written as a number or as "p/q".
pub fn parse_fraction(text: &str) -> Option<f64> {
    let t = text.trim();
    if let Some((p, q)) = t.split_once('/') {
        let p: f64 = p.trim().parse().ok()?;
        let q: f64 = q.trim().parse().ok()?;
        (q != 0.0).then_some(p / q)
    } else {
        t.parse().ok()
    }
}

/// Serde helper accepting `0.5`, `1` or `"1/3"`.
pub fn fraction<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    struct FractionVisitor;

    impl Visitor<'_> for FractionVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number or a fraction string such as \"1/3\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            parse_fraction(v).ok_or_else(|| E::custom(format!("invalid fraction {v:?}")))
        }
    }

    deserializer.deserialize_any(FractionVisitor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_are_one_based() {
        let text = "a = 1\nb = 2\nc = 3\n";
        assert_eq!(line_of(text, 0), 1);
        assert_eq!(line_of(text, 6), 2);
        assert_eq!(line_of(text, 13), 3);
    }

    #[test]
    fn parse_errors_carry_lines() {
        #[derive(serde::Deserialize, Debug)]
        #[allow(dead_code)]
        struct T {
            a: f64,
        }
        let src = Source::new("test.toml", "# comment\n\na = \"x\"\n");
        let err = src.parse::<T>().unwrap_err();
        assert_eq!(err.line, Some(3));
        assert!(err.to_string().starts_with("test.toml:3:"));
    }

    #[test]
    fn fractions() {
        assert_eq!(parse_fraction("1/3"), Some(1.0 / 3.0));
        assert_eq!(parse_fraction(" 0.5 "), Some(0.5));
        assert_eq!(parse_fraction("1/0"), None);
        assert_eq!(parse_fraction("x"), None);
    }
}
