//! Namespaced clinical codes (`sx:bloating`, `cpt:74177`) and the small value
//! types shared by facts, events and rule literals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Namespaces the bundled assets and tooling understand. Codes in any other
/// namespace still parse; validation reports them as warnings.
pub const KNOWN_NAMESPACES: [&str; 8] = ["sx", "exam", "lab", "img", "cpt", "dx", "rx", "demo"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid code `{text}`: {reason}")]
pub struct CodeError {
    pub text: String,
    pub reason: &'static str,
}

/// Characters allowed in a code value, a demographic key or a label literal.
pub fn is_token_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '/')
}

pub(crate) fn is_namespace(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
}

/// A `<namespace>:<value>` code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Code {
    namespace: String,
    value: String,
}

impl Code {
    pub fn new(namespace: &str, value: &str) -> Result<Self, CodeError> {
        let text = format!("{namespace}:{value}");
        if !is_namespace(namespace) {
            return Err(CodeError { text, reason: "namespace must be lowercase alphanumeric" });
        }
        if value.is_empty() || !value.chars().all(is_token_char) {
            return Err(CodeError { text, reason: "value must be a non-empty token" });
        }
        Ok(Code { namespace: namespace.to_owned(), value: value.to_owned() })
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn has_known_namespace(&self) -> bool {
        KNOWN_NAMESPACES.contains(&self.namespace.as_str())
    }
}

impl FromStr for Code {
    type Err = CodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some((ns, value)) => Code::new(ns, value),
            None => Err(CodeError { text: s.to_owned(), reason: "missing `:` separator" }),
        }
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace, self.value)
    }
}

impl Serialize for Code {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Code {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Value of a fact, an event result, or a comparison literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FactValue {
    Number(f64),
    Label(String),
}

impl FactValue {
    /// Label marking a fact as explicitly absent (a negative finding).
    pub const ABSENT: &'static str = "absent";

    pub fn is_absent_marker(&self) -> bool {
        matches!(self, FactValue::Label(l) if l == Self::ABSENT)
    }
}

impl fmt::Display for FactValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactValue::Number(n) => write!(f, "{n}"),
            FactValue::Label(l) => f.write_str(l),
        }
    }
}

/// Attribute value on events and procedure specs (`contrast=true`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Number(n) => write!(f, "{n}"),
            Scalar::Text(t) => f.write_str(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_displays() {
        let code: Code = "cpt:74177".parse().unwrap();
        assert_eq!(code.namespace(), "cpt");
        assert_eq!(code.value(), "74177");
        assert_eq!(code.to_string(), "cpt:74177");
        assert!(code.has_known_namespace());
    }

    #[test]
    fn rejects_malformed() {
        assert!("bloating".parse::<Code>().is_err());
        assert!("sx:".parse::<Code>().is_err());
        assert!("SX:bloating".parse::<Code>().is_err());
        assert!("sx:bad value".parse::<Code>().is_err());
    }

    #[test]
    fn unknown_namespace_parses() {
        let code: Code = "icd:c56".parse().unwrap();
        assert!(!code.has_known_namespace());
    }

    #[test]
    fn serde_as_string() {
        let code: Code = serde_json::from_str("\"lab:ca125\"").unwrap();
        assert_eq!(serde_json::to_string(&code).unwrap(), "\"lab:ca125\"");
        assert!(serde_json::from_str::<Code>("\"nocolon\"").is_err());
    }
}
