//! Guideline checklists as three-valued rule trees.
//!
//! Rules are written in a small DSL:
//!
//! ```text
//! rule  := atom | "ANY(" rules ")" | "ALL(" rules ")"
//!        | "ATLEAST(" int "," rules ")" | "NOT(" rule ")"
//! rules := rule { "," rule }
//! atom  := "has(" code ")" | "cmp(" code op literal ")"
//!        | "demo(" key "=" value ")"
//!        | "event(" kind "," code [ "," "within" int "d" ] ")"
//! ```
//!
//! [`parse_rule`] and [`print_rule`] round-trip; printing is canonical
//! (uppercase combinators, one space after each comma) so printed rules are
//! byte-stable. [`evaluate`] applies strong Kleene logic over a
//! [`PatientSnapshot`](crate::patient::PatientSnapshot) and returns a trace
//! that mirrors the rule tree; [`explain`] turns a trace into reasoning lines.

mod eval;
mod parse;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::code::{is_token_char, Code, FactValue};
use crate::patient::EventKind;

pub use eval::{evaluate, evaluate_with, explain, AtomFinding, RuleTrace, TraceNode, Verdict, World};
pub use parse::{parse_rule, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "!=")]
    Ne,
}

impl CompareOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Eq => "=",
            CompareOp::Ge => ">=",
            CompareOp::Gt => ">",
            CompareOp::Ne => "!=",
        }
    }

    /// Ordering operators need numeric operands; `=` and `!=` accept labels.
    pub fn is_ordering(self) -> bool {
        matches!(self, CompareOp::Lt | CompareOp::Le | CompareOp::Ge | CompareOp::Gt)
    }
}

/// Leaf predicate over a patient snapshot.
#[derive(Debug, Clone, PartialEq)]
pub enum Atom {
    HasFact(Code),
    Compare { code: Code, op: CompareOp, value: FactValue },
    Demo { key: String, value: String },
    HadEvent { kind: EventKind, code: Code, within_days: Option<u32> },
}

impl Atom {
    /// The code whose absence makes this atom undecidable. Demographic atoms
    /// report `demo:<key>`.
    pub fn subject_code(&self) -> Code {
        match self {
            Atom::HasFact(code) | Atom::Compare { code, .. } | Atom::HadEvent { code, .. } => {
                code.clone()
            }
            Atom::Demo { key, .. } => {
                Code::new("demo", key).expect("demographic keys are validated tokens")
            }
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::HasFact(code) => write!(f, "has({code})"),
            Atom::Compare { code, op, value } => write!(f, "cmp({code} {} {value})", op.symbol()),
            Atom::Demo { key, value } => write!(f, "demo({key}={value})"),
            Atom::HadEvent { kind, code, within_days: None } => write!(f, "event({kind}, {code})"),
            Atom::HadEvent { kind, code, within_days: Some(d) } => {
                write!(f, "event({kind}, {code}, within {d}d)")
            }
        }
    }
}

/// A guideline checklist as a boolean rule tree.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidelineRule {
    Atom(Atom),
    All(Vec<GuidelineRule>),
    Any(Vec<GuidelineRule>),
    AtLeast(usize, Vec<GuidelineRule>),
    Not(Box<GuidelineRule>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("{0} requires at least one child")]
    EmptyCombinator(&'static str),
    #[error("ATLEAST({n}) must satisfy 1 <= n <= {children}")]
    AtLeastOutOfRange { n: usize, children: usize },
    #[error("operator `{op}` requires a numeric literal")]
    OrderingOnLabel { op: &'static str },
    #[error("invalid token `{0}`")]
    BadToken(String),
}

fn looks_numeric(s: &str) -> bool {
    parse::parse_number(s).is_some()
}

impl GuidelineRule {
    pub fn has(code: Code) -> Self {
        GuidelineRule::Atom(Atom::HasFact(code))
    }

    /// Checks the structural invariants the parser enforces, for trees built
    /// in code.
    pub fn validate(&self) -> Result<(), RuleError> {
        match self {
            GuidelineRule::Atom(atom) => match atom {
                Atom::Compare { op, value, .. } => match value {
                    FactValue::Label(_) if op.is_ordering() => {
                        Err(RuleError::OrderingOnLabel { op: op.symbol() })
                    }
                    FactValue::Label(l)
                        if l.is_empty() || !l.chars().all(is_token_char) || looks_numeric(l) =>
                    {
                        Err(RuleError::BadToken(l.clone()))
                    }
                    FactValue::Number(n) if !n.is_finite() => Err(RuleError::BadToken(n.to_string())),
                    _ => Ok(()),
                },
                Atom::Demo { key, value } => {
                    for t in [key, value] {
                        if t.is_empty() || !t.chars().all(is_token_char) {
                            return Err(RuleError::BadToken(t.clone()));
                        }
                    }
                    Ok(())
                }
                _ => Ok(()),
            },
            GuidelineRule::All(children) | GuidelineRule::Any(children) => {
                if children.is_empty() {
                    return Err(RuleError::EmptyCombinator(self.combinator_name()));
                }
                children.iter().try_for_each(GuidelineRule::validate)
            }
            GuidelineRule::AtLeast(n, children) => {
                if *n < 1 || *n > children.len() {
                    return Err(RuleError::AtLeastOutOfRange { n: *n, children: children.len() });
                }
                children.iter().try_for_each(GuidelineRule::validate)
            }
            GuidelineRule::Not(child) => child.validate(),
        }
    }

    fn combinator_name(&self) -> &'static str {
        match self {
            GuidelineRule::Atom(_) => "atom",
            GuidelineRule::All(_) => "ALL",
            GuidelineRule::Any(_) => "ANY",
            GuidelineRule::AtLeast(..) => "ATLEAST",
            GuidelineRule::Not(_) => "NOT",
        }
    }

    /// Atoms in left-to-right order.
    pub fn atoms(&self) -> Vec<&Atom> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<&'a Atom>) {
        match self {
            GuidelineRule::Atom(a) => out.push(a),
            GuidelineRule::All(c) | GuidelineRule::Any(c) | GuidelineRule::AtLeast(_, c) => {
                c.iter().for_each(|r| r.collect_atoms(out))
            }
            GuidelineRule::Not(c) => c.collect_atoms(out),
        }
    }

    /// Every code mentioned by an atom.
    pub fn codes(&self) -> BTreeSet<Code> {
        self.atoms().into_iter().map(Atom::subject_code).collect()
    }

    /// Number of nodes in the tree (atoms and combinators).
    pub fn node_count(&self) -> usize {
        match self {
            GuidelineRule::Atom(_) => 1,
            GuidelineRule::All(c) | GuidelineRule::Any(c) | GuidelineRule::AtLeast(_, c) => {
                1 + c.iter().map(GuidelineRule::node_count).sum::<usize>()
            }
            GuidelineRule::Not(c) => 1 + c.node_count(),
        }
    }
}

fn write_children(f: &mut fmt::Formatter<'_>, children: &[GuidelineRule]) -> fmt::Result {
    for (i, child) in children.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{child}")?;
    }
    Ok(())
}

impl fmt::Display for GuidelineRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuidelineRule::Atom(a) => write!(f, "{a}"),
            GuidelineRule::All(c) => {
                f.write_str("ALL(")?;
                write_children(f, c)?;
                f.write_str(")")
            }
            GuidelineRule::Any(c) => {
                f.write_str("ANY(")?;
                write_children(f, c)?;
                f.write_str(")")
            }
            GuidelineRule::AtLeast(n, c) => {
                write!(f, "ATLEAST({n}, ")?;
                write_children(f, c)?;
                f.write_str(")")
            }
            GuidelineRule::Not(c) => write!(f, "NOT({c})"),
        }
    }
}

/// Canonical DSL text for a rule.
pub fn print_rule(rule: &GuidelineRule) -> String {
    rule.to_string()
}

impl Serialize for GuidelineRule {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GuidelineRule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_rule(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> Code {
        s.parse().unwrap()
    }

    #[test]
    fn prints_atoms() {
        assert_eq!(print_rule(&GuidelineRule::has(code("sx:bloating"))), "has(sx:bloating)");
        let not = GuidelineRule::Not(Box::new(GuidelineRule::has(code("sx:bloating"))));
        assert_eq!(print_rule(&not), "NOT(has(sx:bloating))");
        let cmp = GuidelineRule::Atom(Atom::Compare {
            code: code("lab:ca125"),
            op: CompareOp::Ge,
            value: FactValue::Number(35.0),
        });
        assert_eq!(print_rule(&cmp), "cmp(lab:ca125 >= 35)");
        let ev = GuidelineRule::Atom(Atom::HadEvent {
            kind: EventKind::Order,
            code: code("lab:ca125"),
            within_days: Some(30),
        });
        assert_eq!(print_rule(&ev), "event(order, lab:ca125, within 30d)");
    }

    #[test]
    fn prints_nested_canonically() {
        let text = "ANY(  ALL(has(exam:pelvic-mass),demo( menopause = post )),\n ATLEAST( 1 ,has(sx:bloating)))";
        let rule = parse_rule(text).unwrap();
        let printed = print_rule(&rule);
        assert_eq!(
            printed,
            "ANY(ALL(has(exam:pelvic-mass), demo(menopause=post)), ATLEAST(1, has(sx:bloating)))"
        );
        assert_eq!(print_rule(&parse_rule(&printed).unwrap()), printed);
    }

    #[test]
    fn validate_catches_bad_trees() {
        assert_eq!(GuidelineRule::All(vec![]).validate(), Err(RuleError::EmptyCombinator("ALL")));
        let r = GuidelineRule::AtLeast(3, vec![GuidelineRule::has(code("sx:a"))]);
        assert!(matches!(r.validate(), Err(RuleError::AtLeastOutOfRange { .. })));
        let r = GuidelineRule::Atom(Atom::Compare {
            code: code("img:tvus"),
            op: CompareOp::Lt,
            value: FactValue::Label("suspicious".into()),
        });
        assert!(matches!(r.validate(), Err(RuleError::OrderingOnLabel { .. })));
    }

    #[test]
    fn subject_codes() {
        let rule = parse_rule("ALL(has(sx:bloating), demo(menopause=post))").unwrap();
        let codes: Vec<String> = rule.codes().iter().map(Code::to_string).collect();
        assert_eq!(codes, ["demo:menopause", "sx:bloating"]);
        assert_eq!(rule.node_count(), 3);
    }
}
